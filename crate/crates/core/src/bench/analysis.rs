use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BenchError, Result, RunResult, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// `r * sqrt((n - 2) / (1 - r^2))`; infinite when `|r| = 1`.
    pub t_statistic: f64,
    pub n: usize,
}

/// Pearson product-moment correlation, accumulated in one pass.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(BenchError::Statistics(format!(
            "{} xs but {} ys",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(BenchError::Statistics(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let k = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / k;
        my += dy / k;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(BenchError::Statistics("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let t_statistic = if r.abs() < 1.0 {
        r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt()
    } else {
        r.signum() * f64::INFINITY
    };
    Ok(Correlation { r, t_statistic, n })
}

pub fn slowdown_pct_from_times(base_seconds: f64, other_seconds: f64) -> Result<f64> {
    if base_seconds.is_nan() || base_seconds <= 0.0 {
        return Err(BenchError::Statistics(format!(
            "baseline time {base_seconds}"
        )));
    }
    Ok((other_seconds - base_seconds) / base_seconds * 100.0)
}

/// Relative increase of `other`'s total time over `base`'s, in percent.
pub fn slowdown_pct(base: &RunResult, other: &RunResult) -> Result<f64> {
    slowdown_pct_from_times(base.t_f, other.t_f)
}

/// Per-group maximum speed. Non-finite speeds are ignored.
pub fn max_speed<T>(
    items: &[T],
    key: impl Fn(&T) -> String,
    speed: impl Fn(&T) -> f64,
) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for item in items {
        let m = speed(item);
        if !m.is_finite() {
            continue;
        }
        out.entry(key(item))
            .and_modify(|best| *best = best.max(m))
            .or_insert(m);
    }
    out
}

/// Phase durations of one run, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBands {
    pub init: f64,
    pub first_batch: f64,
    pub batches: Vec<f64>,
    pub wrap_up: f64,
    pub total: f64,
}

pub fn timing_bands(result: &RunResult) -> TimingBands {
    let init = result.total_init_seconds();
    let first_batch = result.per_batch_seconds.first().copied().unwrap_or(0.0);
    let batches = result
        .per_batch_seconds
        .iter()
        .skip(1)
        .copied()
        .collect::<Vec<_>>();
    let loop_total: f64 = result.per_batch_seconds.iter().sum();
    TimingBands {
        init,
        first_batch,
        batches,
        wrap_up: result.t_f - init - loop_total,
        total: result.t_f,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub runs: usize,
}

impl SpeedSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 1 {
            v[mid]
        } else {
            (v[mid - 1] + v[mid]) / 2.0
        };
        Some(Self {
            min: v[0],
            median,
            max: v[v.len() - 1],
            runs: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowdownRow {
    /// Loader settings shared by both sides of the comparison.
    pub config: String,
    pub baseline: String,
    pub backend: String,
    pub baseline_seconds: f64,
    pub other_seconds: f64,
    pub slowdown_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnalysisResult {
    /// Speed against total time over all successful rows.
    pub correlation: Option<Correlation>,
    pub slowdowns: Vec<SlowdownRow>,
    /// Keyed by backend, run-model flag and filter.
    pub max_speed: BTreeMap<String, f64>,
    /// Keyed by the full configuration, over repetitions.
    pub speed_summaries: BTreeMap<String, SpeedSummary>,
}

/// Correlation, slowdown against `baseline` (default: the first backend in
/// the rows), max speed and repetition spread.
pub fn analyze(rows: &[SweepRow], baseline: Option<&str>) -> AnalysisResult {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let (speeds, times): (Vec<f64>, Vec<f64>) = ok.iter().map(|r| (r.m, r.t_f)).unzip();
    let correlation = pearson(&speeds, &times).ok();

    let mut by_config: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut speeds_by_config: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &ok {
        by_config
            .entry((r.loader_key(), r.backend.clone()))
            .or_default()
            .push(r.t_f);
        speeds_by_config
            .entry(format!("{} {}", r.backend, r.loader_key()))
            .or_default()
            .push(r.m);
    }
    let baseline = baseline
        .map(str::to_string)
        .or_else(|| ok.first().map(|r| r.backend.clone()));
    let mut slowdowns = Vec::new();
    if let Some(base) = baseline {
        for ((config, backend), times) in &by_config {
            if *backend == base {
                continue;
            }
            let Some(base_times) = by_config.get(&(config.clone(), base.clone())) else {
                continue;
            };
            let (Some(b), Some(o)) = (SpeedSummary::of(base_times), SpeedSummary::of(times)) else {
                continue;
            };
            if let Ok(pct) = slowdown_pct_from_times(b.median, o.median) {
                slowdowns.push(SlowdownRow {
                    config: config.clone(),
                    baseline: base.clone(),
                    backend: backend.clone(),
                    baseline_seconds: b.median,
                    other_seconds: o.median,
                    slowdown_pct: pct,
                });
            }
        }
    }
    let max_speed = max_speed(
        &ok,
        |r| format!("{} model={} filter={}", r.backend, r.run_model, r.filter),
        |r| r.m,
    );
    let speed_summaries = speeds_by_config
        .into_iter()
        .filter_map(|(k, v)| SpeedSummary::of(&v).map(|s| (k, s)))
        .collect();
    AnalysisResult {
        correlation,
        slowdowns,
        max_speed,
        speed_summaries,
    }
}
