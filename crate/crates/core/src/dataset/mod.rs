//! Synthetic image datasets stored as binary shards plus a JSON manifest.
//!
//! Layout inside a backend:
//!
//! ```text
//! {split}/shard{j}.dlbs    packed records, see [`shard`]
//! {split}/manifest.json    locators + class index
//! ```

pub mod shard;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, fnv1a64, SplitMix64};
use crate::storage::{ByteRange, ObjectKey, StorageBackend, StorageError};

pub use shard::{
    decode_record, encode_record, parse_shard, ShardWriter, RECORD_HEADER_LEN, SHARD_HEADER_LEN,
};

pub const DEFAULT_SHARD_CAPACITY: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("sample id {id} out of range for split of {len} samples")]
    OutOfRange { id: u64, len: u64 },
    #[error("sample {id}: record label {record} disagrees with locator label {locator}")]
    LabelMismatch { id: u64, record: u32, locator: u32 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_key(&self) -> ObjectKey {
        ObjectKey::new(format!("{}/manifest.json", self.as_str())).expect("static key")
    }

    pub fn shard_key(&self, index: usize) -> ObjectKey {
        ObjectKey::new(format!("{}/shard{index}.dlbs", self.as_str())).expect("static key")
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::InvalidSpec(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

/// Parameters of a seeded random-image classification dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: u64,
    pub n_val: u64,
    pub n_test: u64,
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub n_classes: u32,
    pub seed: u64,
}

impl DatasetSpec {
    /// 45000/5000/500 colour images of 256x256 with 20 classes.
    pub fn random(seed: u64) -> Self {
        Self {
            n_train: 45_000,
            n_val: 5_000,
            n_test: 500,
            width: 256,
            height: 256,
            channels: 3,
            n_classes: 20,
            seed,
        }
    }

    /// Desk-scale variant: 2000/200/100 images of 64x64, 20 classes, seed 7.
    pub fn random_small() -> Self {
        Self {
            n_train: 2_000,
            n_val: 200,
            n_test: 100,
            width: 64,
            height: 64,
            channels: 3,
            n_classes: 20,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if !matches!(self.channels, 1 | 3) {
            return fail("channels must be 1 or 3");
        }
        if self.n_classes == 0 || self.n_classes > u32::from(u16::MAX) + 1 {
            return fail("n_classes must be in 1..=65536");
        }
        if self.width == 0 || self.height == 0 {
            return fail("width and height must be positive");
        }
        if self.width > u32::from(u16::MAX) || self.height > u32::from(u16::MAX) {
            return fail("width and height must fit in 16 bits");
        }
        for n in [self.n_train, self.n_val, self.n_test] {
            if n > u64::from(u32::MAX) {
                return fail("split sizes must fit in 32 bits");
            }
        }
        Ok(())
    }

    pub fn len(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn pixel_len(&self) -> usize {
        self.width as usize * self.height as usize * self.channels as usize
    }

    pub fn record_len(&self) -> u64 {
        (RECORD_HEADER_LEN + self.pixel_len()) as u64
    }

    fn split_seed(&self, split: Split) -> u64 {
        derive_seed(&[self.seed, fnv1a64(split.as_str().as_bytes())])
    }

    /// Labels of every sample in the split, drawn uniformly over the classes.
    pub fn labels(&self, split: Split) -> Vec<u32> {
        let mut rng = SplitMix64::new(derive_seed(&[self.split_seed(split), 0]));
        (0..self.len(split))
            .map(|_| rng.below(u64::from(self.n_classes)) as u32)
            .collect()
    }

    /// Pixels of one sample; each sample has its own stream.
    pub fn pixels(&self, split: Split, id: u64) -> Vec<u8> {
        let mut buf = vec![0u8; self.pixel_len()];
        SplitMix64::new(derive_seed(&[self.split_seed(split), 1, id])).fill_bytes(&mut buf);
        buf
    }

    pub fn record(&self, split: Split, id: u64, label: u32) -> ImageRecord {
        ImageRecord {
            label,
            width: self.width as usize,
            height: self.height as usize,
            channels: self.channels as usize,
            pixels: self.pixels(split, id),
        }
    }
}

/// One `(image, label)` sample; pixels interleaved row-major `(H, W, C)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub label: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.width * self.height * self.channels {
            return Err(DatasetError::Malformed(format!(
                "{} pixel bytes for a {}x{}x{} image",
                self.pixels.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Where one sample lives: shard object, byte extent, and its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "LocatorRepr", into = "LocatorRepr")]
pub struct Locator {
    pub shard: ObjectKey,
    pub offset: u64,
    pub length: u64,
    pub label: u32,
}

type LocatorRepr = (ObjectKey, u64, u64, u32);

impl From<LocatorRepr> for Locator {
    fn from((shard, offset, length, label): LocatorRepr) -> Self {
        Self {
            shard,
            offset,
            length,
            label,
        }
    }
}

impl From<Locator> for LocatorRepr {
    fn from(l: Locator) -> Self {
        (l.shard, l.offset, l.length, l.label)
    }
}

pub type ClassIndex = BTreeMap<u32, Vec<u64>>;

/// Maps each class id to the ascending ids of its samples. Only classes that
/// occur are present.
pub fn build_class_index(labels: &[u32]) -> ClassIndex {
    let mut index = ClassIndex::new();
    for (id, &label) in labels.iter().enumerate() {
        index.entry(label).or_default().push(id as u64);
    }
    index
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub spec: DatasetSpec,
    pub locators: Vec<Locator>,
    pub class_index: ClassIndex,
}

impl DatasetManifest {
    /// Computes the manifest `generate_random_dataset` would write without
    /// producing any pixels.
    pub fn plan(spec: &DatasetSpec, split: Split, shard_capacity: usize) -> Result<Self> {
        spec.validate()?;
        if shard_capacity == 0 {
            return Err(DatasetError::InvalidSpec(
                "shard_capacity must be at least 1".into(),
            ));
        }
        let labels = spec.labels(split);
        let record_len = spec.record_len();
        let locators = labels
            .iter()
            .enumerate()
            .map(|(id, &label)| {
                let shard = id / shard_capacity;
                let slot = (id % shard_capacity) as u64;
                Locator {
                    shard: split.shard_key(shard),
                    offset: SHARD_HEADER_LEN as u64 + slot * record_len,
                    length: record_len,
                    label,
                }
            })
            .collect();
        Ok(Self {
            split,
            spec: *spec,
            locators,
            class_index: build_class_index(&labels),
        })
    }

    pub fn len(&self) -> u64 {
        self.locators.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.locators.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.locators.iter().map(|l| l.label).collect()
    }

    /// Checks the class index against the locators.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n as usize];
        for (&class, ids) in &self.class_index {
            if class >= self.spec.n_classes {
                return Err(DatasetError::InvalidManifest(format!(
                    "class {class} out of range"
                )));
            }
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DatasetError::InvalidManifest(format!(
                    "class {class} ids not strictly ascending"
                )));
            }
            for &id in ids {
                let slot = seen.get_mut(id as usize).ok_or_else(|| {
                    DatasetError::InvalidManifest(format!("class {class} lists unknown id {id}"))
                })?;
                if *slot {
                    return Err(DatasetError::InvalidManifest(format!(
                        "id {id} in two classes"
                    )));
                }
                *slot = true;
                if self.locators[id as usize].label != class {
                    return Err(DatasetError::InvalidManifest(format!(
                        "id {id} indexed under {class} but labelled {}",
                        self.locators[id as usize].label
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DatasetError::InvalidManifest(format!(
                "id {missing} not indexed"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: Self = serde_json::from_slice(bytes)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Reads `{split}/manifest.json` through `backend`.
    pub fn load(backend: &dyn StorageBackend, split: Split) -> Result<Self> {
        let bytes = backend.get(&split.manifest_key(), None)?;
        let manifest = Self::from_json(&bytes)?;
        if manifest.split != split {
            return Err(DatasetError::InvalidManifest(format!(
                "{} manifest stored under {split}",
                manifest.split
            )));
        }
        Ok(manifest)
    }
}

/// Writes every split's shards and manifest into `out`.
pub fn generate_random_dataset(
    spec: &DatasetSpec,
    shard_capacity: usize,
    out: &dyn StorageBackend,
) -> Result<Vec<DatasetManifest>> {
    Split::ALL
        .iter()
        .map(|&split| generate_split(spec, split, shard_capacity, out))
        .collect()
}

pub fn generate_split(
    spec: &DatasetSpec,
    split: Split,
    shard_capacity: usize,
    out: &dyn StorageBackend,
) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::plan(spec, split, shard_capacity)?;
    for (shard_idx, chunk) in manifest.locators.chunks(shard_capacity).enumerate() {
        let first = (shard_idx * shard_capacity) as u64;
        let mut writer = ShardWriter::with_capacity(chunk.len(), spec.record_len() as usize);
        for (slot, loc) in chunk.iter().enumerate() {
            let id = first + slot as u64;
            let offset = writer.push(&spec.record(split, id, loc.label))?;
            debug_assert_eq!(offset, loc.offset);
        }
        out.put(&split.shard_key(shard_idx), &writer.finish())?;
    }
    out.put(&split.manifest_key(), &manifest.to_json()?)?;
    Ok(manifest)
}

/// Fetches sample `id` with one ranged read.
pub fn read_record(
    manifest: &DatasetManifest,
    id: u64,
    backend: &dyn StorageBackend,
) -> Result<ImageRecord> {
    let loc = manifest
        .locators
        .get(id as usize)
        .ok_or(DatasetError::OutOfRange {
            id,
            len: manifest.len(),
        })?;
    let bytes = backend.get(
        &loc.shard,
        Some(ByteRange::with_len(loc.offset, loc.length)?),
    )?;
    let record = decode_record(&bytes)?;
    if record.label != loc.label {
        return Err(DatasetError::LabelMismatch {
            id,
            record: record.label,
            locator: loc.label,
        });
    }
    Ok(record)
}
