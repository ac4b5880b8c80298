//! Storage-to-consumer data loading and a harness for measuring its speed.
//!
//! The pieces compose in one direction: [`dataset`] writes sharded records
//! to a [`storage`] backend, [`sampling`] decides the visit order,
//! [`transforms`] turn records into tensors, [`pipeline`] batches them with
//! optional worker threads, and [`bench`] times the whole thing.

pub mod bench;
pub mod dataset;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod storage;
pub mod transforms;

pub use bench::{BackendConfig, BackendKind, BenchConfig, BenchError, Cutoff, RunResult};
pub use dataset::{DatasetManifest, DatasetSpec, ImageRecord, Split};
pub use model::{LinearModel, SyntheticConsumer};
pub use pipeline::{Batch, Loader, LoaderConfig, LoaderError};
pub use sampling::{SampleOrder, SamplerConfig, SamplerKind};
pub use storage::{ByteRange, LatencyModel, ObjectKey, StorageBackend, StorageError};
pub use transforms::{TensorImage, TransformConfig};
