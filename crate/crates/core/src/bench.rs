//! Inference latency measurement.
//!
//! Each measured batch generates `batch_size` samples end to end (noise,
//! Euler integration, decoding where applicable and the inverse pixel
//! transform). Per-sample time is the batch wall time divided by the batch
//! size; warm-up batches are run but excluded, and the median over the
//! measured batches is reported together with the 10th and 90th percentiles.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{ParticleFeatures, ShowerImage};
use crate::flow_matching::PixelFm;
use crate::latent::LatentFm;
use crate::numerics::DType;
use crate::{par, Error, Result};

/// Coarsest acceptable clock granularity.
pub const MAX_TIMER_RESOLUTION: Duration = Duration::from_micros(1);

/// Smallest non-zero difference between successive monotonic clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn check_timer() -> Result<Duration> {
    let r = timer_resolution();
    if r > MAX_TIMER_RESOLUTION {
        return Err(Error::invalid(format!("monotonic clock resolution {r:?} exceeds 1µs")));
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub batches: usize,
    pub steps: usize,
    pub precision: DType,
    pub seed: u64,
    /// Allow the data-parallel kernels; off pins the run to one worker.
    pub multithreaded: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            warmup: 5,
            batches: 20,
            steps: crate::flow_matching::DEFAULT_PIXEL_STEPS,
            precision: DType::F32,
            seed: 0,
            multithreaded: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub label: String,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub measured_batches: usize,
    pub steps: usize,
    pub precision: DType,
    pub multithreaded: bool,
    /// Per-sample milliseconds.
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

/// A generator under test.
pub trait BenchModel {
    fn generate(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ShowerImage>>;
}

impl BenchModel for PixelFm {
    fn generate(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ShowerImage>> {
        self.sample_images(features, steps, seed, precision)
    }
}

impl BenchModel for LatentFm {
    fn generate(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ShowerImage>> {
        self.sample_images(features, steps, seed, precision)
    }
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct SequentialGuard(bool);

impl Drop for SequentialGuard {
    fn drop(&mut self) {
        par::set_sequential(!self.0);
    }
}

/// Times `cfg.warmup + cfg.batches` batches of `model`. Every batch uses the
/// same seed and conditions (cycled from `cond`), so the returned images of
/// the last batch do not depend on the timing parameters.
pub fn bench_inference(
    label: &str,
    model: &dyn BenchModel,
    cond: &[ParticleFeatures],
    cfg: &BenchConfig,
) -> Result<(BenchResult, Vec<ShowerImage>)> {
    if cfg.batches == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("batches and batch_size must be ≥ 1"));
    }
    if cond.is_empty() {
        return Err(Error::invalid("benchmark needs at least one condition row"));
    }
    check_timer()?;
    let feats: Vec<ParticleFeatures> = cond.iter().cycle().take(cfg.batch_size).copied().collect();
    let _guard = SequentialGuard(par::is_parallel());
    par::set_sequential(!cfg.multithreaded);
    let mut times = Vec::with_capacity(cfg.batches);
    let mut last = Vec::new();
    for b in 0..cfg.warmup + cfg.batches {
        let start = Instant::now();
        last = model.generate(&feats, cfg.steps, cfg.seed, cfg.precision)?;
        let ms = start.elapsed().as_secs_f64() * 1e3 / cfg.batch_size as f64;
        if b >= cfg.warmup {
            times.push(ms);
        }
    }
    times.sort_by(f64::total_cmp);
    let result = BenchResult {
        label: label.to_string(),
        batch_size: cfg.batch_size,
        warmup_batches: cfg.warmup,
        measured_batches: cfg.batches,
        steps: cfg.steps,
        precision: cfg.precision,
        multithreaded: cfg.multithreaded,
        median_ms: quantile(&times, 0.5),
        p10_ms: quantile(&times, 0.1),
        p90_ms: quantile(&times, 0.9),
    };
    Ok((result, last))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub result: BenchResult,
    /// Relative change of the median against the previous row.
    pub relative_change: Option<f64>,
}

pub fn ladder_report(rows: &[BenchResult]) -> Result<Vec<LadderRow>> {
    if rows.len() < 2 {
        return Err(Error::invalid("a ladder needs at least two rows"));
    }
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| LadderRow {
            result: r.clone(),
            relative_change: i.checked_sub(1).map(|p| r.median_ms / rows[p].median_ms - 1.0),
        })
        .collect())
}

/// CSV with one row per ladder rung.
pub fn ladder_csv(rows: &[LadderRow]) -> String {
    let mut out = String::from(
        "label,batch_size,warmup_batches,measured_batches,steps,precision,multithreaded,median_ms,p10_ms,p90_ms,relative_change\n",
    );
    for row in rows {
        let r = &row.result;
        let rel = row.relative_change.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.batch_size,
            r.warmup_batches,
            r.measured_batches,
            r.steps,
            r.precision.name(),
            r.multithreaded,
            r.median_ms,
            r.p10_ms,
            r.p90_ms,
            rel
        );
    }
    out
}
