//! Per-epoch sample orders: sequential, shuffled, class-filtered, and split
//! across data-parallel replicas.
//!
//! Composition is always filter, then shuffle, then shard.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_record, DatasetError, DatasetManifest};
use crate::rng::{derive_seed, SplitMix64};
use crate::storage::StorageBackend;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("class {class} does not exist (dataset has {n_classes} classes)")]
    UnknownClass { class: u32, n_classes: u32 },
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("storage scan failed: {0}")]
    Scan(#[from] DatasetError),
}

pub type Result<T, E = SamplingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Sequential,
    #[default]
    Shuffle,
    /// Restrict to the requested classes through the manifest's class index.
    FilterIndexed,
    /// Restrict by checking the label of every sample.
    FilterNaive,
}

impl SamplerKind {
    pub fn is_filter(&self) -> bool {
        matches!(self, SamplerKind::FilterIndexed | SamplerKind::FilterNaive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub seed: u64,
    pub classes: Option<Vec<u32>>,
    pub rank: usize,
    pub world_size: usize,
    pub drop_last_partial: bool,
    /// Naive filtering reads every record through storage instead of the
    /// manifest's label column, so its cost shows up in measurements.
    pub scan_storage: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Shuffle,
            seed: 0,
            classes: None,
            rank: 0,
            world_size: 1,
            drop_last_partial: false,
            scan_storage: false,
        }
    }
}

impl SamplerConfig {
    pub fn sequential() -> Self {
        Self {
            kind: SamplerKind::Sequential,
            ..Self::default()
        }
    }

    pub fn shuffle(seed: u64) -> Self {
        Self {
            kind: SamplerKind::Shuffle,
            seed,
            ..Self::default()
        }
    }

    pub fn filter(kind: SamplerKind, seed: u64, classes: Vec<u32>) -> Self {
        Self {
            kind,
            seed,
            classes: Some(classes),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 || self.rank >= self.world_size {
            return Err(SamplingError::InvalidConfig(format!(
                "rank {} outside world of {}",
                self.rank, self.world_size
            )));
        }
        if self.kind.is_filter() != self.classes.is_some() {
            return Err(SamplingError::InvalidConfig(
                "classes are required for filter kinds and only for them".into(),
            ));
        }
        Ok(())
    }
}

/// Sample ids in visiting order; no duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleOrder(Vec<u64>);

impl SampleOrder {
    pub fn new(ids: Vec<u64>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u64> {
        self.0
    }
}

fn requested_classes(config: &SamplerConfig, manifest: &DatasetManifest) -> Result<BTreeSet<u32>> {
    let classes: BTreeSet<u32> = config.classes.iter().flatten().copied().collect();
    let n_classes = manifest.spec.n_classes;
    if let Some(&class) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(SamplingError::UnknownClass { class, n_classes });
    }
    Ok(classes)
}

/// Ids whose label is in `classes`, read from the class index.
pub fn filter_indexed(manifest: &DatasetManifest, classes: &BTreeSet<u32>) -> Vec<u64> {
    let mut ids: Vec<u64> = classes
        .iter()
        .filter_map(|c| manifest.class_index.get(c))
        .flatten()
        .copied()
        .collect();
    ids.sort_unstable();
    ids
}

/// Ids whose label is in `classes`, found by scanning every label. With a
/// backend, each record is fetched and decoded.
pub fn filter_naive(
    manifest: &DatasetManifest,
    classes: &BTreeSet<u32>,
    backend: Option<&dyn StorageBackend>,
) -> Result<Vec<u64>> {
    let mut ids = Vec::new();
    for id in 0..manifest.len() {
        let label = match backend {
            Some(b) => read_record(manifest, id, b)?.label,
            None => manifest.locators[id as usize].label,
        };
        if classes.contains(&label) {
            ids.push(id);
        }
    }
    Ok(ids)
}

/// Full (unsharded) order for `epoch`.
///
/// `backend` is only consulted by naive filtering with `scan_storage` set.
pub fn epoch_order(
    config: &SamplerConfig,
    manifest: &DatasetManifest,
    epoch: u64,
    backend: Option<&dyn StorageBackend>,
) -> Result<SampleOrder> {
    config.validate()?;
    let mut ids: Vec<u64> = match config.kind {
        SamplerKind::Sequential | SamplerKind::Shuffle => (0..manifest.len()).collect(),
        SamplerKind::FilterIndexed => {
            filter_indexed(manifest, &requested_classes(config, manifest)?)
        }
        SamplerKind::FilterNaive => {
            let classes = requested_classes(config, manifest)?;
            let scan = if config.scan_storage {
                Some(backend.ok_or_else(|| {
                    SamplingError::InvalidConfig("scan_storage requires a backend".into())
                })?)
            } else {
                None
            };
            filter_naive(manifest, &classes, scan)?
        }
    };
    if config.kind != SamplerKind::Sequential {
        SplitMix64::new(derive_seed(&[config.seed, epoch])).shuffle(&mut ids);
    }
    Ok(SampleOrder(ids))
}

/// Positions congruent to `rank` modulo `world_size`. With
/// `drop_last_partial` every replica is cut to `floor(n / world_size)`.
pub fn shard_for_replica(
    order: &SampleOrder,
    rank: usize,
    world_size: usize,
    drop_last_partial: bool,
) -> SampleOrder {
    assert!(
        rank < world_size,
        "rank {rank} outside world of {world_size}"
    );
    let per_replica = order.len() / world_size;
    let ids = order.0.iter().skip(rank).step_by(world_size).copied();
    SampleOrder(if drop_last_partial {
        ids.take(per_replica).collect()
    } else {
        ids.collect()
    })
}

/// The order one replica visits in `epoch`.
pub fn replica_order(
    config: &SamplerConfig,
    manifest: &DatasetManifest,
    epoch: u64,
    backend: Option<&dyn StorageBackend>,
) -> Result<SampleOrder> {
    let full = epoch_order(config, manifest, epoch, backend)?;
    Ok(shard_for_replica(
        &full,
        config.rank,
        config.world_size,
        config.drop_last_partial,
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataset::{generate_split, DatasetSpec, Split};
    use crate::storage::MemoryBackend;

    fn manifest(n: u64) -> DatasetManifest {
        let spec = DatasetSpec {
            n_train: n,
            n_val: 0,
            n_test: 0,
            width: 2,
            height: 2,
            channels: 1,
            n_classes: 20,
            seed: 3,
        };
        DatasetManifest::plan(&spec, Split::Train, 100).unwrap()
    }

    #[test]
    fn sequential_is_identity() {
        let o = epoch_order(&SamplerConfig::sequential(), &manifest(4), 0, None).unwrap();
        assert_eq!(o.ids(), &[0, 1, 2, 3]);
    }

    #[test]
    fn singleton_shuffle() {
        let o = epoch_order(&SamplerConfig::shuffle(9), &manifest(1), 0, None).unwrap();
        assert_eq!(o.ids(), &[0]);
    }

    #[test]
    fn epochs_reshuffle() {
        let m = manifest(50);
        let cfg = SamplerConfig::shuffle(1234);
        let e0 = epoch_order(&cfg, &m, 0, None).unwrap();
        let e0b = epoch_order(&cfg, &m, 0, None).unwrap();
        let e1 = epoch_order(&cfg, &m, 1, None).unwrap();
        assert_eq!(e0, e0b);
        assert_ne!(e0, e1);
    }

    #[test]
    fn filters_agree_with_storage_scan() {
        let spec = DatasetSpec::random_small();
        let store = MemoryBackend::new();
        let small = DatasetSpec {
            n_train: 300,
            ..spec
        };
        let m = generate_split(&small, Split::Train, 64, &store).unwrap();
        let classes = vec![0, 13];
        let indexed = epoch_order(
            &SamplerConfig::filter(SamplerKind::FilterIndexed, 5, classes.clone()),
            &m,
            0,
            None,
        )
        .unwrap();
        let mut naive_cfg = SamplerConfig::filter(SamplerKind::FilterNaive, 5, classes);
        naive_cfg.scan_storage = true;
        let naive = epoch_order(&naive_cfg, &m, 0, Some(&store)).unwrap();
        assert_eq!(indexed, naive);
        assert!(indexed
            .ids()
            .iter()
            .all(|&id| [0, 13].contains(&m.locators[id as usize].label)));
        assert!(!indexed.is_empty());
    }

    #[test]
    fn filter_errors() {
        let m = manifest(10);
        let err = epoch_order(
            &SamplerConfig::filter(SamplerKind::FilterIndexed, 0, vec![20]),
            &m,
            0,
            None,
        );
        assert!(matches!(
            err,
            Err(SamplingError::UnknownClass { class: 20, .. })
        ));
        let mut missing = SamplerConfig::sequential();
        missing.kind = SamplerKind::FilterNaive;
        assert!(epoch_order(&missing, &m, 0, None).is_err());
        let mut scan = SamplerConfig::filter(SamplerKind::FilterNaive, 0, vec![1]);
        scan.scan_storage = true;
        assert!(epoch_order(&scan, &m, 0, None).is_err());
        let bad_rank = SamplerConfig {
            rank: 2,
            world_size: 2,
            ..SamplerConfig::default()
        };
        assert!(epoch_order(&bad_rank, &m, 0, None).is_err());
    }

    #[test]
    fn empty_filter_result_is_legal() {
        let m = manifest(0);
        let o = epoch_order(
            &SamplerConfig::filter(SamplerKind::FilterIndexed, 0, vec![3]),
            &m,
            0,
            None,
        )
        .unwrap();
        assert!(o.is_empty());
    }

    #[test]
    fn shard_examples() {
        let order = SampleOrder::new((0..10).collect());
        assert_eq!(
            shard_for_replica(&order, 0, 2, false).ids(),
            &[0, 2, 4, 6, 8]
        );
        assert_eq!(
            shard_for_replica(&order, 1, 2, false).ids(),
            &[1, 3, 5, 7, 9]
        );
        assert_eq!(shard_for_replica(&order, 0, 1, false), order);

        let seven = SampleOrder::new((0..7).collect());
        // Positions: rank 0 -> 0,2,4,(6); rank 1 -> 1,3,5. Truncated to 3 each.
        let r0 = shard_for_replica(&seven, 0, 2, true);
        let r1 = shard_for_replica(&seven, 1, 2, true);
        assert_eq!(r0.ids(), &[0, 2, 4]);
        assert_eq!(r1.ids(), &[1, 3, 5]);
    }

    proptest! {
        #[test]
        fn shuffle_is_permutation(n in 0u64..300, seed: u64, epoch in 0u64..5) {
            let o = epoch_order(&SamplerConfig::shuffle(seed), &manifest(n), epoch, None).unwrap();
            let mut sorted = o.into_inner();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn filters_equivalent(n in 0u64..300, classes in prop::collection::vec(0u32..20, 0..5), seed: u64) {
            let m = manifest(n);
            let a = epoch_order(&SamplerConfig::filter(SamplerKind::FilterIndexed, seed, classes.clone()), &m, 0, None).unwrap();
            let b = epoch_order(&SamplerConfig::filter(SamplerKind::FilterNaive, seed, classes), &m, 0, None).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn shards_partition(ids in prop::collection::vec(any::<u64>(), 0..100), world in 1usize..6, drop in any::<bool>()) {
            let mut uniq = ids;
            uniq.sort_unstable();
            uniq.dedup();
            let order = SampleOrder::new(uniq.clone());
            let parts: Vec<SampleOrder> = (0..world).map(|r| shard_for_replica(&order, r, world, drop)).collect();
            let mut all: Vec<u64> = parts.iter().flat_map(|p| p.ids().iter().copied()).collect();
            let total = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), total, "replicas overlap");
            if drop {
                prop_assert!(parts.iter().all(|p| p.len() == uniq.len() / world));
            } else {
                prop_assert_eq!(all, uniq);
            }
        }
    }
}
