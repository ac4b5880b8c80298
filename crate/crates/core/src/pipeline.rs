//! The data loader: sampler order in, collated batches out.
//!
//! With `num_workers == 0` every batch is fetched, transformed and collated in
//! the caller's thread inside [`Loader::next_batch`]. Otherwise worker `w`
//! produces the batches whose index is congruent to `w` modulo the worker
//! count, and the consumer re-sequences them so delivery always follows the
//! sampler order. A batch may only be started once it is within
//! `prefetch_depth` of the next batch to deliver, which bounds the number of
//! finished-but-undelivered batches.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{read_record, DatasetError, DatasetManifest};
use crate::sampling::{replica_order, SamplerConfig, SamplingError};
use crate::storage::StorageBackend;
use crate::transforms::{apply_stack, sample_seed, TensorImage, TransformConfig, TransformError};

#[derive(Debug, thiserror::Error)]
pub enum LoaderError {
    #[error("invalid loader config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: u64,
        #[source]
        source: SampleError,
    },
    #[error("cannot collate: {0}")]
    Collate(String),
    #[error("worker for batch {0} exited without producing it")]
    WorkerLost(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

pub type Result<T, E = LoaderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub num_workers: usize,
    /// Finished batches allowed ahead of the consumer; `None` means two per
    /// worker (at least one).
    pub prefetch_depth: Option<usize>,
    pub drop_last: bool,
    /// Copy each delivered batch into a pre-allocated staging buffer.
    pub staging: bool,
    pub sampler: SamplerConfig,
    pub transform: TransformConfig,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            num_workers: 0,
            prefetch_depth: None,
            drop_last: false,
            staging: false,
            sampler: SamplerConfig::default(),
            transform: TransformConfig::default(),
        }
    }
}

impl LoaderConfig {
    pub fn effective_prefetch_depth(&self) -> usize {
        self.prefetch_depth.unwrap_or((2 * self.num_workers).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LoaderError::Config("batch_size must be at least 1".into()));
        }
        if self.prefetch_depth == Some(0) {
            return Err(LoaderError::Config(
                "prefetch_depth must be at least 1".into(),
            ));
        }
        self.sampler.validate()?;
        Ok(())
    }
}

/// Collated samples: `x` is row-major `(B, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f32>,
    pub shape: [usize; 4],
    pub y: Vec<u32>,
    /// Sample ids in batch order.
    pub ids: Vec<u64>,
    pub batch_index: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Flattened width of one sample.
    pub fn sample_dim(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.sample_dim();
        &self.x[i * d..(i + 1) * d]
    }
}

/// Stacks images along a new leading axis.
pub fn collate(samples: &[(TensorImage, u32)]) -> Result<Batch> {
    let Some((first, _)) = samples.first() else {
        return Err(LoaderError::Collate("empty sample list".into()));
    };
    let (c, h, w) = first.shape();
    let mut x = Vec::with_capacity(samples.len() * c * h * w);
    let mut y = Vec::with_capacity(samples.len());
    for (img, label) in samples {
        if img.shape() != (c, h, w) {
            return Err(LoaderError::Collate(format!(
                "shape {:?} differs from {:?}",
                img.shape(),
                (c, h, w)
            )));
        }
        x.extend_from_slice(&img.data);
        y.push(*label);
    }
    Ok(Batch {
        x,
        shape: [samples.len(), c, h, w],
        y,
        ids: Vec::new(),
        batch_index: 0,
    })
}

#[derive(Debug, Clone, Default)]
pub struct LoaderStats {
    /// Time from `create` until the loader could serve its first request.
    pub init_duration: Duration,
    /// Time spent inside each `next_batch` call that returned a batch.
    pub per_batch_durations: Vec<Duration>,
    pub samples_delivered: u64,
    pub staging_duration: Duration,
}

/// Everything a worker needs for one epoch; immutable and shared.
struct EpochPlan {
    manifest: Arc<DatasetManifest>,
    backend: Arc<dyn StorageBackend>,
    transform: TransformConfig,
    epoch: u64,
    batches: Vec<Vec<u64>>,
}

impl EpochPlan {
    fn produce(&self, index: usize, stop: &AtomicBool) -> Result<Option<Batch>> {
        let ids = &self.batches[index];
        let mut samples = Vec::with_capacity(ids.len());
        for &id in ids {
            if stop.load(Ordering::Relaxed) {
                return Ok(None);
            }
            let sample = read_record(&self.manifest, id, self.backend.as_ref())
                .map_err(SampleError::from)
                .and_then(|rec| {
                    let seed = sample_seed(self.transform.seed, self.epoch, id);
                    Ok((apply_stack(&rec, &self.transform, seed)?, rec.label))
                })
                .map_err(|source| LoaderError::Sample {
                    sample_id: id,
                    source,
                })?;
            samples.push(sample);
        }
        let mut batch = collate(&samples)?;
        batch.ids = ids.clone();
        batch.batch_index = index;
        Ok(Some(batch))
    }
}

#[derive(Default)]
struct WindowState {
    delivered: usize,
    stopped: bool,
}

/// Admission control shared by workers and consumer.
#[derive(Default)]
struct Window {
    state: Mutex<WindowState>,
    advanced: Condvar,
    stop: AtomicBool,
    buffered: AtomicUsize,
}

impl Window {
    /// Blocks until `index` may be started; false once stopped.
    fn admit(&self, index: usize, depth: usize) -> bool {
        let mut state = self.state.lock().expect("lock poisoned");
        loop {
            if state.stopped {
                return false;
            }
            if index < state.delivered + depth {
                return true;
            }
            state = self.advanced.wait(state).expect("lock poisoned");
        }
    }

    fn advance(&self, delivered: usize) {
        self.state.lock().expect("lock poisoned").delivered = delivered;
        self.advanced.notify_all();
    }

    fn halt(&self) {
        self.stop.store(true, Ordering::Relaxed);
        self.state.lock().expect("lock poisoned").stopped = true;
        self.advanced.notify_all();
    }
}

struct Workers {
    window: Arc<Window>,
    rx: Receiver<(usize, Result<Batch>)>,
    pending: BTreeMap<usize, Result<Batch>>,
    handles: Vec<JoinHandle<()>>,
}

impl Workers {
    fn spawn(plan: Arc<EpochPlan>, count: usize, depth: usize) -> Self {
        let window = Arc::new(Window::default());
        let (tx, rx) = mpsc::channel();
        let handles = (0..count)
            .map(|w| {
                let plan = Arc::clone(&plan);
                let window = Arc::clone(&window);
                let tx: Sender<_> = tx.clone();
                thread::Builder::new()
                    .name(format!("loader-worker-{w}"))
                    .spawn(move || {
                        for index in (w..plan.batches.len()).step_by(count) {
                            if !window.admit(index, depth) {
                                return;
                            }
                            let result = match plan.produce(index, &window.stop) {
                                Ok(Some(batch)) => Ok(batch),
                                Ok(None) => return,
                                Err(e) => Err(e),
                            };
                            let failed = result.is_err();
                            window.buffered.fetch_add(1, Ordering::AcqRel);
                            if tx.send((index, result)).is_err() || failed {
                                return;
                            }
                        }
                    })
                    .expect("spawn loader worker")
            })
            .collect();
        Self {
            window,
            rx,
            pending: BTreeMap::new(),
            handles,
        }
    }

    fn take(&mut self, index: usize) -> Result<Batch> {
        let result = loop {
            if let Some(r) = self.pending.remove(&index) {
                break r;
            }
            match self.rx.recv() {
                Ok((i, r)) => {
                    self.pending.insert(i, r);
                }
                Err(_) => return Err(LoaderError::WorkerLost(index)),
            }
        };
        self.window.buffered.fetch_sub(1, Ordering::AcqRel);
        self.window.advance(index + 1);
        result
    }

    fn stop(&mut self) {
        self.window.halt();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// A batch iterator over one replica's share of a split.
pub struct Loader {
    config: LoaderConfig,
    manifest: Arc<DatasetManifest>,
    backend: Arc<dyn StorageBackend>,
    plan: Arc<EpochPlan>,
    next_index: usize,
    workers: Option<Workers>,
    staging: Vec<f32>,
    stats: LoaderStats,
    shut_down: bool,
}

impl Loader {
    /// Validates the config, builds epoch 0's order and starts any workers.
    pub fn create(
        config: LoaderConfig,
        manifest: Arc<DatasetManifest>,
        backend: Arc<dyn StorageBackend>,
    ) -> Result<Self> {
        let started = Instant::now();
        config.validate()?;
        let spec = manifest.spec;
        let staging = if config.staging {
            vec![0f32; config.batch_size * spec.pixel_len()]
        } else {
            Vec::new()
        };
        let plan = Arc::new(Self::plan(&config, &manifest, &backend, 0)?);
        let mut loader = Self {
            config,
            manifest,
            backend,
            plan,
            next_index: 0,
            workers: None,
            staging,
            stats: LoaderStats::default(),
            shut_down: false,
        };
        loader.spawn_workers();
        loader.stats.init_duration = started.elapsed();
        Ok(loader)
    }

    fn plan(
        config: &LoaderConfig,
        manifest: &Arc<DatasetManifest>,
        backend: &Arc<dyn StorageBackend>,
        epoch: u64,
    ) -> Result<EpochPlan> {
        let order = replica_order(&config.sampler, manifest, epoch, Some(backend.as_ref()))?;
        let mut batches: Vec<Vec<u64>> = order
            .ids()
            .chunks(config.batch_size)
            .map(<[u64]>::to_vec)
            .collect();
        if config.drop_last && batches.last().is_some_and(|b| b.len() < config.batch_size) {
            batches.pop();
        }
        Ok(EpochPlan {
            manifest: Arc::clone(manifest),
            backend: Arc::clone(backend),
            transform: config.transform.clone(),
            epoch,
            batches,
        })
    }

    fn spawn_workers(&mut self) {
        if self.config.num_workers > 0 && !self.plan.batches.is_empty() {
            self.workers = Some(Workers::spawn(
                Arc::clone(&self.plan),
                self.config.num_workers,
                self.config.effective_prefetch_depth(),
            ));
        }
    }

    /// Stops the current epoch's workers and begins `epoch` from its first batch.
    pub fn start_epoch(&mut self, epoch: u64) -> Result<()> {
        self.stop_workers();
        self.plan = Arc::new(Self::plan(
            &self.config,
            &self.manifest,
            &self.backend,
            epoch,
        )?);
        self.next_index = 0;
        self.shut_down = false;
        self.spawn_workers();
        Ok(())
    }

    pub fn epoch(&self) -> u64 {
        self.plan.epoch
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.config
    }

    pub fn num_batches(&self) -> usize {
        self.plan.batches.len()
    }

    /// Sample ids planned for this epoch, in delivery order.
    pub fn planned_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.plan.batches.iter().flatten().copied()
    }

    pub fn init_duration(&self) -> Duration {
        self.stats.init_duration
    }

    pub fn stats(&self) -> &LoaderStats {
        &self.stats
    }

    /// Finished batches waiting for the consumer.
    pub fn buffered(&self) -> usize {
        self.workers
            .as_ref()
            .map_or(0, |w| w.window.buffered.load(Ordering::Acquire))
    }

    /// The next batch in sampler order, or `None` at the end of the epoch
    /// (and after shutdown).
    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        if self.shut_down || self.next_index >= self.plan.batches.len() {
            return Ok(None);
        }
        let started = Instant::now();
        let index = self.next_index;
        let batch = match self.workers.as_mut() {
            Some(workers) => workers.take(index)?,
            None => {
                let never = AtomicBool::new(false);
                self.plan.produce(index, &never)?.expect("never stopped")
            }
        };
        self.next_index += 1;
        if self.config.staging {
            let t = Instant::now();
            self.staging[..batch.x.len()].copy_from_slice(&batch.x);
            self.stats.staging_duration += t.elapsed();
        }
        self.stats.samples_delivered += batch.len() as u64;
        self.stats.per_batch_durations.push(started.elapsed());
        Ok(Some(batch))
    }

    fn stop_workers(&mut self) {
        if let Some(mut w) = self.workers.take() {
            w.stop();
        }
    }

    /// Stops all workers. Idempotent.
    pub fn shutdown(&mut self) {
        self.stop_workers();
        self.shut_down = true;
    }
}

impl Iterator for Loader {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, DatasetSpec, Split};
    use crate::storage::{LatencyBackend, LatencyModel, MemoryBackend};

    fn dataset(n: u64) -> (Arc<DatasetManifest>, Arc<MemoryBackend>) {
        let spec = DatasetSpec {
            n_train: n,
            n_val: 0,
            n_test: 0,
            width: 8,
            height: 6,
            channels: 3,
            n_classes: 5,
            seed: 17,
        };
        let store = Arc::new(MemoryBackend::new());
        let m = generate_split(&spec, Split::Train, 16, store.as_ref()).unwrap();
        (Arc::new(m), store)
    }

    fn config(batch_size: usize, workers: usize) -> LoaderConfig {
        LoaderConfig {
            batch_size,
            num_workers: workers,
            sampler: SamplerConfig::shuffle(3),
            transform: TransformConfig {
                seed: 9,
                ..TransformConfig::default()
            },
            ..LoaderConfig::default()
        }
    }

    fn drain(loader: &mut Loader) -> Vec<Batch> {
        loader.by_ref().collect::<Result<Vec<_>>>().unwrap()
    }

    #[test]
    fn batch_counts() {
        let (m, s) = dataset(10);
        let mut l = Loader::create(
            LoaderConfig {
                drop_last: true,
                ..config(4, 0)
            },
            m.clone(),
            s.clone(),
        )
        .unwrap();
        assert_eq!(drain(&mut l).len(), 2);
        let mut l = Loader::create(config(4, 0), m, s).unwrap();
        let batches = drain(&mut l);
        assert_eq!(
            batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        assert_eq!(l.stats().samples_delivered, 10);
    }

    #[test]
    fn full_size_batch_arithmetic() {
        // 45000 samples at batch 64: 703 full batches and a final batch of 8.
        let ids: Vec<u64> = (0..45_000).collect();
        let chunks: Vec<_> = ids.chunks(64).collect();
        assert_eq!(chunks.len(), 704);
        assert_eq!(chunks.last().unwrap().len(), 8);
    }

    #[test]
    fn contents_independent_of_workers() {
        let (m, s) = dataset(37);
        let reference = drain(&mut Loader::create(config(5, 0), m.clone(), s.clone()).unwrap());
        for workers in [1, 2, 3] {
            for depth in [1, 2, 5] {
                let cfg = LoaderConfig {
                    prefetch_depth: Some(depth),
                    staging: true,
                    ..config(5, workers)
                };
                let got = drain(&mut Loader::create(cfg, m.clone(), s.clone()).unwrap());
                assert_eq!(got, reference, "workers={workers} depth={depth}");
            }
        }
        let indices: Vec<usize> = reference.iter().map(|b| b.batch_index).collect();
        assert_eq!(indices, (0..reference.len()).collect::<Vec<_>>());
        for b in &reference {
            for (i, &id) in b.ids.iter().enumerate() {
                assert_eq!(b.y[i], m.locators[id as usize].label);
            }
        }
    }

    #[test]
    fn prefetch_fills_window_then_stops() {
        let (m, s) = dataset(60);
        let cfg = LoaderConfig {
            prefetch_depth: Some(4),
            ..config(3, 2)
        };
        let mut l = Loader::create(cfg, m.clone(), s.clone()).unwrap();
        thread::sleep(Duration::from_millis(200));
        assert_eq!(l.buffered(), 4);
        l.next_batch().unwrap().unwrap();
        thread::sleep(Duration::from_millis(200));
        assert_eq!(l.buffered(), 4);

        let (m2, s2) = dataset(6);
        let l2 = Loader::create(
            LoaderConfig {
                prefetch_depth: Some(4),
                ..config(3, 2)
            },
            m2,
            s2,
        )
        .unwrap();
        thread::sleep(Duration::from_millis(200));
        assert_eq!(l2.buffered(), 2);
    }

    #[test]
    fn zero_workers_spawn_nothing() {
        let (m, s) = dataset(8);
        let l = Loader::create(config(4, 0), m, s).unwrap();
        assert!(l.workers.is_none());
        assert_eq!(l.buffered(), 0);
    }

    #[test]
    fn empty_dataset_yields_nothing() {
        let (m, s) = dataset(0);
        let mut l = Loader::create(config(4, 2), m, s).unwrap();
        assert!(l.next_batch().unwrap().is_none());
    }

    #[test]
    fn shutdown_is_idempotent_and_prompt() {
        let (m, s) = dataset(40);
        let slow: Arc<dyn StorageBackend> =
            Arc::new(LatencyBackend::new(s, LatencyModel::constant(20.0), 0).unwrap());
        let mut l = Loader::create(config(4, 2), m, slow).unwrap();
        l.next_batch().unwrap().unwrap();
        let t = Instant::now();
        l.shutdown();
        l.shutdown();
        assert!(t.elapsed() < Duration::from_secs(2));
        assert!(l.next_batch().unwrap().is_none());
    }

    #[test]
    fn epochs_reshuffle_and_restart() {
        let (m, s) = dataset(20);
        let mut l = Loader::create(config(20, 1), m, s).unwrap();
        let e0 = l.next_batch().unwrap().unwrap();
        l.start_epoch(1).unwrap();
        let e1 = l.next_batch().unwrap().unwrap();
        assert_ne!(e0.ids, e1.ids);
        let mut a = e0.ids.clone();
        let mut b = e1.ids.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn worker_failure_names_sample() {
        let (m, _) = dataset(12);
        // Backend missing every shard.
        let empty: Arc<dyn StorageBackend> = Arc::new(MemoryBackend::new());
        for workers in [0, 2] {
            let mut l = Loader::create(
                LoaderConfig {
                    sampler: SamplerConfig::sequential(),
                    ..config(4, workers)
                },
                m.clone(),
                empty.clone(),
            )
            .unwrap();
            match l.next_batch() {
                Err(LoaderError::Sample { sample_id, .. }) => assert_eq!(sample_id, 0),
                other => panic!("expected sample error, got {other:?}"),
            }
        }
    }

    #[test]
    fn collate_examples() {
        let img = TensorImage {
            data: vec![1.0, 2.0, 3.0, 4.0],
            channels: 1,
            height: 2,
            width: 2,
        };
        let b = collate(&[(img.clone(), 7)]).unwrap();
        assert_eq!(b.shape, [1, 1, 2, 2]);
        assert_eq!(b.x, img.data);
        assert_eq!(b.y, vec![7]);
        assert!(collate(&[]).is_err());
        let other = TensorImage::zeros(1, 2, 3);
        assert!(collate(&[(img, 0), (other, 1)]).is_err());

        let big: Vec<(TensorImage, u32)> = (0..64)
            .map(|i| (TensorImage::zeros(3, 256, 256), i))
            .collect();
        assert_eq!(collate(&big).unwrap().shape, [64, 3, 256, 256]);
    }

    #[test]
    fn collate_preserves_elements() {
        let mut rng = crate::rng::SplitMix64::new(1);
        let imgs: Vec<(TensorImage, u32)> = (0..6)
            .map(|i| {
                let data = (0..3 * 4 * 5).map(|_| rng.next_f64() as f32).collect();
                (
                    TensorImage {
                        data,
                        channels: 3,
                        height: 4,
                        width: 5,
                    },
                    i,
                )
            })
            .collect();
        let b = collate(&imgs).unwrap();
        for (i, (img, label)) in imgs.iter().enumerate() {
            assert_eq!(b.image(i), img.data.as_slice());
            assert_eq!(b.y[i], *label);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LoaderConfig {
            batch_size: 0,
            ..LoaderConfig::default()
        }
        .validate()
        .is_err());
        assert!(LoaderConfig {
            prefetch_depth: Some(0),
            ..LoaderConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            LoaderConfig {
                num_workers: 3,
                ..LoaderConfig::default()
            }
            .effective_prefetch_depth(),
            6
        );
        assert_eq!(LoaderConfig::default().effective_prefetch_depth(), 1);
    }
}
