use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{ByteRange, ObjectKey, Result, StorageBackend, StorageError, StorageStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatencyDistribution {
    #[default]
    Constant,
    Lognormal,
}

/// Per-request round-trip delay.
///
/// `mean_ms`/`std_ms` describe the delay distribution itself (not the
/// underlying normal). Samples are clamped to at least `min_ms`; the constant
/// distribution ignores `std_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub mean_ms: f64,
    #[serde(default)]
    pub std_ms: f64,
    #[serde(default)]
    pub min_ms: f64,
    #[serde(default)]
    pub distribution: LatencyDistribution,
}

impl LatencyModel {
    pub fn constant(ms: f64) -> Self {
        Self {
            mean_ms: ms,
            std_ms: 0.0,
            min_ms: 0.0,
            distribution: LatencyDistribution::Constant,
        }
    }

    pub fn lognormal(mean_ms: f64, std_ms: f64, min_ms: f64) -> Self {
        Self {
            mean_ms,
            std_ms,
            min_ms,
            distribution: LatencyDistribution::Lognormal,
        }
    }

    /// Cloud object store in the nearest region: 17.3 ms round trip, 14.8 ms floor.
    pub fn aws_like() -> Self {
        Self {
            mean_ms: 17.3,
            std_ms: 1.3,
            min_ms: 14.8,
            distribution: LatencyDistribution::Constant,
        }
    }

    /// Self-hosted store over a shared wireless LAN: heavy-tailed, 59.2 ± 58.5 ms, 8.8 ms floor.
    pub fn minio_like() -> Self {
        Self::lognormal(59.2, 58.5, 8.8)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.mean_ms, self.std_ms, self.min_ms];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(StorageError::InvalidLatency(format!(
                "fields must be finite and non-negative: {self:?}"
            )));
        }
        if self.distribution == LatencyDistribution::Lognormal && self.mean_ms <= 0.0 {
            return Err(StorageError::InvalidLatency(
                "lognormal mean must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.mean_ms == 0.0 && self.min_ms == 0.0
    }

    /// Builds a sampler with its own seeded generator.
    pub fn sampler(&self, seed: u64) -> Result<LatencySampler> {
        self.validate()?;
        let lognormal = match self.distribution {
            LatencyDistribution::Lognormal if self.std_ms > 0.0 => {
                // Moment matching: sigma^2 = ln(1 + s^2/m^2), mu = ln m - sigma^2/2.
                let ratio = self.std_ms / self.mean_ms;
                let sigma2 = (1.0 + ratio * ratio).ln();
                let mu = self.mean_ms.ln() - sigma2 / 2.0;
                Some(
                    LogNormal::new(mu, sigma2.sqrt())
                        .map_err(|e| StorageError::InvalidLatency(e.to_string()))?,
                )
            }
            _ => None,
        };
        Ok(LatencySampler {
            model: *self,
            lognormal,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
        })
    }
}

#[derive(Debug)]
pub struct LatencySampler {
    model: LatencyModel,
    lognormal: Option<LogNormal<f64>>,
    rng: Mutex<StdRng>,
}

impl LatencySampler {
    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn sample_ms(&self) -> f64 {
        let raw = match &self.lognormal {
            Some(dist) => {
                let mut rng = self.rng.lock().expect("lock poisoned");
                dist.sample(&mut *rng)
            }
            None => self.model.mean_ms,
        };
        raw.max(self.model.min_ms)
    }

    pub fn sample(&self) -> Duration {
        Duration::from_secs_f64(self.sample_ms() / 1000.0)
    }

    /// Sleeps for one sampled delay.
    pub fn delay(&self) {
        let d = self.sample();
        if !d.is_zero() {
            thread::sleep(d);
        }
    }
}

/// Delays every request by one sample of the model before forwarding it.
#[derive(Debug)]
pub struct LatencyBackend<B> {
    inner: B,
    sampler: LatencySampler,
}

impl<B: StorageBackend> LatencyBackend<B> {
    pub fn new(inner: B, model: LatencyModel, seed: u64) -> Result<Self> {
        Ok(Self {
            inner,
            sampler: model.sampler(seed)?,
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: StorageBackend> StorageBackend for LatencyBackend<B> {
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        self.sampler.delay();
        self.inner.get(key, range)
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()> {
        self.sampler.delay();
        self.inner.put(key, data)
    }

    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>> {
        self.sampler.delay();
        self.inner.list(prefix)
    }

    fn head(&self, key: &ObjectKey) -> Result<u64> {
        self.sampler.delay();
        self.inner.head(key)
    }

    fn stats(&self) -> StorageStats {
        self.inner.stats()
    }

    fn describe(&self) -> String {
        let m = self.sampler.model();
        match m.distribution {
            LatencyDistribution::Constant => format!("{}+{}ms", self.inner.describe(), m.mean_ms),
            LatencyDistribution::Lognormal => {
                format!(
                    "{}+lognormal({},{})ms",
                    self.inner.describe(),
                    m.mean_ms,
                    m.std_ms
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use super::*;
    use crate::storage::MemoryBackend;

    #[test]
    fn constant_delay_floor() {
        let inner = MemoryBackend::new();
        let key = ObjectKey::new("k").unwrap();
        inner.put(&key, b"abc").unwrap();
        let slow = LatencyBackend::new(inner, LatencyModel::aws_like(), 1).unwrap();
        let start = Instant::now();
        for _ in 0..10 {
            assert_eq!(slow.get(&key, None).unwrap(), b"abc");
        }
        assert!(start.elapsed() >= Duration::from_secs_f64(0.173));
    }

    #[test]
    fn zero_delay_is_passthrough() {
        let inner = MemoryBackend::new();
        let key = ObjectKey::new("k").unwrap();
        inner.put(&key, b"abc").unwrap();
        let fast = LatencyBackend::new(inner, LatencyModel::constant(0.0), 1).unwrap();
        let start = Instant::now();
        for _ in 0..1000 {
            fast.get(&key, None).unwrap();
        }
        assert!(start.elapsed() < Duration::from_millis(500));
    }

    #[test]
    fn lognormal_matches_moments_and_floor() {
        let sampler = LatencyModel::minio_like().sampler(42).unwrap();
        let samples: Vec<f64> = (0..1000).map(|_| sampler.sample_ms()).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((mean - 59.2).abs() / 59.2 < 0.15, "mean {mean}");
        assert!(samples.iter().all(|&s| s >= 8.8));
    }

    #[test]
    fn constant_ignores_std_and_respects_min() {
        let m = LatencyModel {
            mean_ms: 5.0,
            std_ms: 100.0,
            min_ms: 7.0,
            distribution: LatencyDistribution::Constant,
        };
        let s = m.sampler(0).unwrap();
        assert_eq!(s.sample_ms(), 7.0);
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(LatencyModel::constant(-1.0).validate().is_err());
        assert!(LatencyModel::lognormal(0.0, 1.0, 0.0).validate().is_err());
        assert!(LatencyModel::constant(f64::NAN).validate().is_err());
    }
}
