use std::collections::HashMap;
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{run_loop_with, BackendConfig, BenchConfig, BenchError, Result, RunResult};
use crate::dataset::Split;
use crate::pipeline::LoaderConfig;
use crate::rng::SplitMix64;
use crate::sampling::SamplerKind;
use crate::storage::StorageBackend;

/// Axes of a sweep. An empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub base: BenchConfig,
    pub batch_sizes: Vec<usize>,
    pub num_workers: Vec<usize>,
    pub backends: Vec<BackendConfig>,
    pub run_model: Vec<bool>,
    /// Class lists to filter on; `null` means no filtering.
    pub filters: Vec<Option<Vec<u32>>>,
    pub filter_kind: SamplerKind,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            base: BenchConfig::default(),
            batch_sizes: Vec::new(),
            num_workers: Vec::new(),
            backends: Vec::new(),
            run_model: Vec::new(),
            filters: Vec::new(),
            filter_kind: SamplerKind::FilterIndexed,
        }
    }
}

fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.batch_sizes.is_empty()
            && self.num_workers.is_empty()
            && self.backends.is_empty()
            && self.run_model.is_empty()
            && self.filters.is_empty()
    }

    /// Every combination, in axis order.
    pub fn expand(&self) -> Result<Vec<BenchConfig>> {
        if self.is_empty() {
            return Err(BenchError::EmptyGrid);
        }
        let base = &self.base;
        let mut out = Vec::new();
        for backend in axis(&self.backends, base.backend.clone()) {
            for filter in axis(&self.filters, None) {
                for &run_model in &axis(&self.run_model, base.run_model) {
                    for &batch_size in &axis(&self.batch_sizes, base.loader.batch_size) {
                        for &workers in &axis(&self.num_workers, base.loader.num_workers) {
                            let mut c = base.clone();
                            c.backend = backend.clone();
                            c.run_model = run_model;
                            c.loader.batch_size = batch_size;
                            c.loader.num_workers = workers;
                            if let Some(classes) = &filter {
                                c.loader.sampler.kind = self.filter_kind;
                                c.loader.sampler.classes = Some(classes.clone());
                            }
                            out.push(c);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One result-table row. Columns are fixed; numeric fields are zero when
/// `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fingerprint: String,
    pub batch_size: usize,
    pub num_workers: usize,
    pub backend: String,
    pub run_model: bool,
    /// Filtered classes joined by `;`, empty when unfiltered.
    pub filter: String,
    pub repetition: usize,
    pub m: f64,
    pub n: u64,
    pub t_f: f64,
    pub init_train: f64,
    pub init_val: f64,
    pub init_test: f64,
    pub first_batch: f64,
    pub batches: usize,
    pub error: Option<String>,
}

impl SweepRow {
    fn new(config: &BenchConfig, repetition: usize, outcome: &Result<RunResult>) -> Self {
        let filter = match &config.loader.sampler.classes {
            Some(classes) => classes
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            None => String::new(),
        };
        let mut row = Self {
            fingerprint: config.fingerprint(),
            batch_size: config.loader.batch_size,
            num_workers: config.loader.num_workers,
            backend: config.backend.label(),
            run_model: config.run_model,
            filter,
            repetition,
            m: 0.0,
            n: 0,
            t_f: 0.0,
            init_train: 0.0,
            init_val: 0.0,
            init_test: 0.0,
            first_batch: 0.0,
            batches: 0,
            error: None,
        };
        match outcome {
            Ok(r) => {
                let init = |s: Split| r.init_times.get(&s).copied().unwrap_or(0.0);
                row.m = r.m;
                row.n = r.n;
                row.t_f = r.t_f;
                row.init_train = init(Split::Train);
                row.init_val = init(Split::Val);
                row.init_test = init(Split::Test);
                row.first_batch = r.first_batch_seconds().unwrap_or(0.0);
                row.batches = r.per_batch_seconds.len();
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }

    /// Loader-side settings, excluding backend and repetition.
    pub fn loader_key(&self) -> String {
        format!(
            "batch={} workers={} model={} filter={}",
            self.batch_size, self.num_workers, self.run_model, self.filter
        )
    }
}

/// Runs every grid point `base.repetitions` times through `run`. Failures
/// become rows with `error` set.
pub fn sweep_with(
    grid: &SweepGrid,
    mut run: impl FnMut(&BenchConfig, usize) -> Result<RunResult>,
) -> Result<Vec<SweepRow>> {
    let configs = grid.expand()?;
    let mut rows = Vec::with_capacity(configs.len() * grid.base.repetitions);
    for config in &configs {
        for rep in 0..grid.base.repetitions {
            let outcome = config.validate().and_then(|()| run(config, rep));
            rows.push(SweepRow::new(config, rep, &outcome));
        }
    }
    Ok(rows)
}

/// Like [`sweep_with`], building each distinct backend once.
pub fn sweep(grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut backends = BackendCache::default();
    sweep_with(grid, |config, rep| {
        run_loop_with(config, backends.get(&config.backend)?, rep)
    })
}

#[derive(Default)]
struct BackendCache(HashMap<String, Arc<dyn StorageBackend>>);

impl BackendCache {
    fn get(&mut self, config: &BackendConfig) -> Result<Arc<dyn StorageBackend>> {
        let key = serde_json::to_string(config)?;
        if let Some(b) = self.0.get(&key) {
            return Ok(Arc::clone(b));
        }
        let b = config.build()?;
        self.0.insert(key, Arc::clone(&b));
        Ok(b)
    }
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(rows: &[SweepRow], path: &Path) -> Result<()> {
    serde_json::to_writer_pretty(File::create(path)?, rows)?;
    Ok(())
}

/// Reads rows written by [`write_csv`] or [`write_json`], by extension.
pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_reader(File::open(path)?)?)
    } else {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Loader settings to search over. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TuneSpace {
    pub batch_sizes: Vec<usize>,
    pub num_workers: Vec<usize>,
    pub prefetch_depths: Vec<Option<usize>>,
}

impl TuneSpace {
    pub fn candidates(&self, base: &LoaderConfig) -> Vec<LoaderConfig> {
        let mut out = Vec::new();
        for &batch_size in &axis(&self.batch_sizes, base.batch_size) {
            for &num_workers in &axis(&self.num_workers, base.num_workers) {
                for &prefetch_depth in &axis(&self.prefetch_depths, base.prefetch_depth) {
                    out.push(LoaderConfig {
                        batch_size,
                        num_workers,
                        prefetch_depth,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub loader: LoaderConfig,
    pub m: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: LoaderConfig,
    pub best_m: f64,
    /// Every evaluated candidate, in evaluation order.
    pub trace: Vec<TuneTrial>,
}

/// Evaluates up to `budget` candidates, drawn without replacement in an
/// order fixed by `seed`, and returns the fastest.
pub fn tune_for_speed_with(
    base: &BenchConfig,
    candidates: &[LoaderConfig],
    budget: usize,
    seed: u64,
    mut run: impl FnMut(&BenchConfig) -> Result<RunResult>,
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(BenchError::Config("budget must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Err(BenchError::EmptyGrid);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    order.truncate(budget);

    let mut trace = Vec::with_capacity(order.len());
    let mut best: Option<(usize, f64)> = None;
    for i in order {
        let config = BenchConfig {
            loader: candidates[i].clone(),
            ..base.clone()
        };
        match run(&config) {
            Ok(r) => {
                if best.is_none_or(|(_, m)| r.m > m) {
                    best = Some((i, r.m));
                }
                trace.push(TuneTrial {
                    loader: config.loader,
                    m: Some(r.m),
                    error: None,
                });
            }
            Err(e) => trace.push(TuneTrial {
                loader: config.loader,
                m: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (i, best_m) = best.ok_or(BenchError::AllCandidatesFailed(trace.len()))?;
    Ok(TuneResult {
        best: candidates[i].clone(),
        best_m,
        trace,
    })
}

/// Tunes against the base config's backend, built once.
pub fn tune_for_speed(
    base: &BenchConfig,
    space: &TuneSpace,
    budget: usize,
    seed: u64,
) -> Result<TuneResult> {
    base.validate()?;
    let backend = base.backend.build()?;
    let candidates = space.candidates(&base.loader);
    tune_for_speed_with(base, &candidates, budget, seed, |c| {
        run_loop_with(c, Arc::clone(&backend), 0)
    })
}
