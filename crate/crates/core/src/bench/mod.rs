//! The measurement harness: timed loader init, the batch loop with cutoff and
//! warm-up, replicated runs, sweeps, tuning and analysis.

mod analysis;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analysis::{
    analyze, max_speed, pearson, slowdown_pct, slowdown_pct_from_times, timing_bands,
    AnalysisResult, Correlation, SlowdownRow, SpeedSummary, TimingBands,
};
pub use report::{render_bands_svg, render_markdown, render_speed_svg};
pub use sweep::{
    read_rows, sweep, sweep_with, tune_for_speed, tune_for_speed_with, write_csv, write_json,
    SweepGrid, SweepRow, TuneResult, TuneSpace, TuneTrial,
};

use crate::dataset::{DatasetError, DatasetManifest, Split};
use crate::model::{LinearModel, ModelError, SyntheticConsumer};
use crate::pipeline::{Loader, LoaderConfig, LoaderError};
use crate::storage::{
    CacheConfig, CachedBackend, HttpBackend, LatencyBackend, LatencyModel, LocalBackend,
    MemoryBackend, StorageBackend, StorageError,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no batches")]
    NoBatches,
    #[error("no batches left after {0} warm-up batch(es)")]
    NoCountedBatches(usize),
    #[error("replica {rank}: {source}")]
    Replica {
        rank: usize,
        #[source]
        source: Box<BenchError>,
    },
    #[error("empty grid")]
    EmptyGrid,
    #[error("all {0} candidates failed")]
    AllCandidatesFailed(usize),
    #[error("statistics undefined: {0}")]
    Statistics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// When the measurement loop stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    /// Stop after this many processed batches.
    Batches(u64),
    /// Stop at the first batch fetched this many seconds into an epoch.
    Seconds(f64),
}

impl Cutoff {
    fn validate(&self) -> Result<()> {
        match *self {
            Cutoff::Batches(0) => Err(BenchError::Config("cutoff of 0 batches".into())),
            Cutoff::Seconds(s) if s.is_nan() || s <= 0.0 => {
                Err(BenchError::Config(format!("cutoff of {s} seconds")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Local,
    Memory,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Dataset root for `local`, and the directory preloaded by `memory`.
    pub dir: Option<PathBuf>,
    /// Server URL for `remote`; falls back to the endpoint environment variable.
    pub endpoint: Option<String>,
    /// Delay injected in front of every request.
    pub latency: Option<LatencyModel>,
    pub latency_seed: u64,
    pub cache: Option<CacheConfig>,
}

impl BackendConfig {
    pub fn local(dir: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Local,
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn memory(dir: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Memory,
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::default()
        }
    }

    pub fn with_latency(mut self, model: LatencyModel) -> Self {
        self.latency = Some(model);
        self
    }

    /// Short name used in result tables.
    pub fn label(&self) -> String {
        let mut label = match self.kind {
            BackendKind::Local => "local".to_string(),
            BackendKind::Memory => "memory".to_string(),
            BackendKind::Remote => "remote".to_string(),
        };
        if let Some(l) = &self.latency {
            label.push_str(&format!("+{}ms", l.mean_ms));
        }
        if let Some(c) = &self.cache {
            label.push_str(&format!("+cache{}", c.capacity_bytes));
        }
        label
    }

    /// Builds the backend stack: base store, then latency, then cache.
    pub fn build(&self) -> Result<Arc<dyn StorageBackend>> {
        let dir = || {
            self.dir
                .clone()
                .ok_or_else(|| BenchError::Config(format!("{:?} backend needs a dir", self.kind)))
        };
        let base: Arc<dyn StorageBackend> = match self.kind {
            BackendKind::Local => Arc::new(LocalBackend::new(dir()?)?),
            BackendKind::Memory => Arc::new(MemoryBackend::load_dir(dir()?)?),
            BackendKind::Remote => Arc::new(match &self.endpoint {
                Some(e) => HttpBackend::new(e.clone())?,
                None => HttpBackend::from_env()?,
            }),
        };
        let delayed: Arc<dyn StorageBackend> = match self.latency {
            Some(model) => Arc::new(LatencyBackend::new(base, model, self.latency_seed)?),
            None => base,
        };
        Ok(match self.cache {
            Some(cfg) => Arc::new(CachedBackend::new(delayed, cfg)?),
            None => delayed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub epochs: u64,
    /// `None` runs every epoch to completion.
    pub cutoff: Option<Cutoff>,
    pub run_model: bool,
    pub warmup_batches: usize,
    /// Post-warm-up batches that count towards the speed; `None` counts all.
    pub speed_window: Option<usize>,
    pub repetitions: usize,
    pub loader: LoaderConfig,
    /// Split that is benchmarked.
    pub split: Split,
    /// Splits whose loaders are initialized (and timed) before the loop.
    pub init_modes: Vec<Split>,
    pub backend: BackendConfig,
    pub replicas: usize,
    /// Fixed per-batch consumer overhead in milliseconds.
    pub consumer_delay_ms: f64,
    pub learning_rate: f32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            cutoff: Some(Cutoff::Batches(10)),
            run_model: false,
            warmup_batches: 1,
            speed_window: Some(10),
            repetitions: 3,
            loader: LoaderConfig::default(),
            split: Split::Train,
            init_modes: Split::ALL.to_vec(),
            backend: BackendConfig::default(),
            replicas: 1,
            consumer_delay_ms: 0.0,
            learning_rate: 0.01,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(BenchError::Config("epochs must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(BenchError::Config("repetitions must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err(BenchError::Config("replicas must be at least 1".into()));
        }
        if self.speed_window == Some(0) {
            return Err(BenchError::Config("speed_window must be at least 1".into()));
        }
        if self.consumer_delay_ms.is_nan() || self.consumer_delay_ms < 0.0 {
            return Err(BenchError::Config(
                "consumer_delay_ms must be non-negative".into(),
            ));
        }
        if let Some(c) = &self.cutoff {
            c.validate()?;
        }
        self.loader.validate()?;
        Ok(())
    }

    /// Stable short hash of the whole config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunResult {
    pub fingerprint: String,
    pub repetition: usize,
    /// Samples per second over the counted batches.
    pub m: f64,
    /// Samples in the counted batches.
    pub n: u64,
    /// Seconds from before the first init to the end of the run.
    pub t_f: f64,
    pub init_times: BTreeMap<Split, f64>,
    /// Time between successive processed-batch marks, across all epochs.
    pub per_batch_seconds: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epoch_times: Vec<f64>,
    pub counted_batches: usize,
    pub counted_seconds: f64,
    pub warmup_batches: usize,
    /// Ids in processing order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub processed_ids: Vec<u64>,
}

impl RunResult {
    pub fn first_batch_seconds(&self) -> Option<f64> {
        self.per_batch_seconds.first().copied()
    }

    pub fn total_init_seconds(&self) -> f64 {
        self.init_times.values().sum()
    }

    pub fn samples_processed(&self) -> u64 {
        self.batch_sizes.iter().sum::<usize>() as u64
    }
}

/// One run of the measurement loop against the configured backend.
pub fn run_loop(config: &BenchConfig, repetition: usize) -> Result<RunResult> {
    config.validate()?;
    run_loop_with(config, config.backend.build()?, repetition)
}

/// One run of the measurement loop against an already-built backend.
pub fn run_loop_with(
    config: &BenchConfig,
    backend: Arc<dyn StorageBackend>,
    repetition: usize,
) -> Result<RunResult> {
    config.validate()?;
    let t0 = Instant::now();
    let mut init_times = BTreeMap::new();
    let mut modes = config.init_modes.clone();
    if !modes.contains(&config.split) {
        modes.push(config.split);
    }
    let mut loader = None;
    for mode in modes {
        let started = Instant::now();
        let manifest = Arc::new(DatasetManifest::load(backend.as_ref(), mode)?);
        let l = Loader::create(config.loader.clone(), manifest, Arc::clone(&backend))?;
        init_times.insert(mode, started.elapsed().as_secs_f64());
        if mode == config.split {
            loader = Some(l);
        }
    }
    let mut loader = loader.expect("benchmarked split initialized");
    let spec = loader.manifest().spec;

    let dim = spec.pixel_len();
    let mut device = vec![0f32; config.loader.batch_size * dim];
    let mut model = config
        .run_model
        .then(|| LinearModel::<f32>::zeros(dim, spec.n_classes as usize, config.learning_rate));
    let consumer =
        SyntheticConsumer::new(Duration::from_secs_f64(config.consumer_delay_ms / 1000.0));

    let window_end = config
        .speed_window
        .map_or(usize::MAX, |w| config.warmup_batches + w);
    let mut result = RunResult {
        fingerprint: config.fingerprint(),
        repetition,
        warmup_batches: config.warmup_batches,
        ..RunResult::default()
    };
    let mut counted = Duration::ZERO;
    'epochs: for epoch in 0..config.epochs {
        if epoch > 0 {
            loader.start_epoch(epoch)?;
        }
        let t0e = Instant::now();
        let mut last = t0e;
        let mut stop = false;
        while let Some(batch) = loader.next_batch()? {
            if let Some(Cutoff::Seconds(c)) = config.cutoff {
                if t0e.elapsed().as_secs_f64() >= c {
                    stop = true;
                    break;
                }
            }
            let x = &mut device[..batch.x.len()];
            x.copy_from_slice(&batch.x);
            if let Some(model) = model.as_mut() {
                model.train_step(x, &batch.y)?;
            }
            if !consumer.delay.is_zero() {
                consumer.consume(x);
            }
            let now = Instant::now();
            let dur = now - last;
            last = now;

            let index = result.per_batch_seconds.len();
            result.per_batch_seconds.push(dur.as_secs_f64());
            result.batch_sizes.push(batch.len());
            result.processed_ids.extend_from_slice(&batch.ids);
            if index >= config.warmup_batches && index < window_end {
                result.n += batch.len() as u64;
                result.counted_batches += 1;
                counted += dur;
            }
            if let Some(Cutoff::Batches(k)) = config.cutoff {
                if result.per_batch_seconds.len() as u64 >= k {
                    stop = true;
                    break;
                }
            }
        }
        result.epoch_times.push(t0e.elapsed().as_secs_f64());
        if stop {
            break 'epochs;
        }
    }
    loader.shutdown();
    result.t_f = t0.elapsed().as_secs_f64();
    result.init_times = init_times;

    if result.per_batch_seconds.is_empty() {
        return Err(BenchError::NoBatches);
    }
    if result.counted_batches == 0 {
        return Err(BenchError::NoCountedBatches(config.warmup_batches));
    }
    result.counted_seconds = counted.as_secs_f64();
    result.m = result.n as f64 / result.counted_seconds;
    Ok(result)
}

/// Runs `config.repetitions` times.
pub fn run_repetitions(config: &BenchConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let backend = config.backend.build()?;
    (0..config.repetitions)
        .map(|r| run_loop_with(config, Arc::clone(&backend), r))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicatedResult {
    pub replicas: Vec<RunResult>,
    /// Sum of the replicas' speeds.
    pub aggregate_m: f64,
    pub wall_seconds: f64,
}

/// Runs `world_size` consumers concurrently, each on its own shard of the
/// epoch with its own loader and model.
pub fn run_replicated(
    config: &BenchConfig,
    world_size: usize,
    backend: Arc<dyn StorageBackend>,
    repetition: usize,
) -> Result<ReplicatedResult> {
    if world_size == 0 {
        return Err(BenchError::Config("world_size must be at least 1".into()));
    }
    let configs: Vec<BenchConfig> = (0..world_size)
        .map(|rank| {
            let mut c = config.clone();
            c.replicas = world_size;
            c.loader.sampler.rank = rank;
            c.loader.sampler.world_size = world_size;
            c.loader.sampler.drop_last_partial = true;
            c
        })
        .collect();
    let started = Instant::now();
    let outcomes: Vec<Result<RunResult>> = thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                let backend = Arc::clone(&backend);
                s.spawn(move || run_loop_with(c, backend, repetition))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replica thread panicked"))
            .collect()
    });
    let wall_seconds = started.elapsed().as_secs_f64();
    let replicas = outcomes
        .into_iter()
        .enumerate()
        .map(|(rank, r)| {
            r.map_err(|e| BenchError::Replica {
                rank,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate_m = replicas.iter().map(|r| r.m).sum();
    Ok(ReplicatedResult {
        replicas,
        aggregate_m,
        wall_seconds,
    })
}
