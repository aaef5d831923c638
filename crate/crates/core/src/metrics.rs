//! Channel-level evaluation: the five readout channels of a response,
//! Wasserstein-1 between channel distributions, per-example MAE, the
//! original-data baselines and histogram tables.

use std::collections::HashMap;
use std::fmt::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ParticleFeatures, ShowerImage, NUM_FEATURES};
use crate::rng::seeded;
use crate::{Error, Result};

pub const NUM_CHANNELS: usize = 5;

/// Photon sums: four quadrant channels then the whole-area channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelVector(pub [u64; NUM_CHANNELS]);

impl ChannelVector {
    pub fn as_f64(&self) -> [f64; NUM_CHANNELS] {
        self.0.map(|v| v as f64)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

/// Which fiber parity feeds the quadrant channels; the whole-area channel
/// reads the other parity, so the five channels partition the fibers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberParity {
    /// Quadrants read `(row + col)` even, the common channel odd.
    #[default]
    EvenQuadrants,
    OddQuadrants,
}

/// Channel sums of a `height × width` photon grid. Quadrant boundaries are
/// `row < height / 2` and `col < width / 2`; quadrants are numbered
/// top-left, top-right, bottom-left, bottom-right.
pub fn extract_channels_grid(pixels: &[u16], height: usize, width: usize, parity: FiberParity) -> ChannelVector {
    debug_assert_eq!(pixels.len(), height * width);
    let quad_parity = match parity {
        FiberParity::EvenQuadrants => 0,
        FiberParity::OddQuadrants => 1,
    };
    let (hh, hw) = (height / 2, width / 2);
    let mut ch = [0u64; NUM_CHANNELS];
    for r in 0..height {
        let row = &pixels[r * width..(r + 1) * width];
        for (c, &p) in row.iter().enumerate() {
            if (r + c) % 2 == quad_parity {
                let q = usize::from(r >= hh) * 2 + usize::from(c >= hw);
                ch[q] += p as u64;
            } else {
                ch[4] += p as u64;
            }
        }
    }
    ChannelVector(ch)
}

pub fn extract_channels(img: &ShowerImage) -> ChannelVector {
    let (h, w) = img.detector.dims();
    extract_channels_grid(&img.pixels, h, w, FiberParity::default())
}

/// Wasserstein-1 distance between two 1D empirical distributions, integrating
/// the difference of their piecewise-constant quantile functions exactly.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Wasserstein distance of an empty sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as u128, b.len() as u128);
    // quantile breakpoints i/n and j/m, measured in units of 1/(n·m)
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut acc = 0.0f64;
    while i < a.len() && j < b.len() {
        let ea = (i as u128 + 1) * m;
        let eb = (j as u128 + 1) * n;
        let next = ea.min(eb);
        acc += (a[i] - b[j]).abs() * (next - pos) as f64;
        pos = next;
        if ea == next {
            i += 1;
        }
        if eb == next {
            j += 1;
        }
    }
    Ok(acc / (n * m) as f64)
}

fn column(set: &[ChannelVector], k: usize) -> Vec<f64> {
    set.iter().map(|c| c.0[k] as f64).collect()
}

/// Mean over the five channels of the per-channel Wasserstein-1 distance.
pub fn wasserstein1_channels(w: &[ChannelVector], w_hat: &[ChannelVector]) -> Result<f64> {
    if w.is_empty() || w_hat.is_empty() {
        return Err(Error::invalid("Wasserstein distance needs two non-empty sets"));
    }
    let mut total = 0.0;
    for k in 0..NUM_CHANNELS {
        total += wasserstein1(&column(w, k), &column(w_hat, k))?;
    }
    Ok(total / NUM_CHANNELS as f64)
}

/// `(1/n) Σ_k Σ_i |w_i^k − ŵ_i^k|` over index-paired responses.
pub fn mae_channels(w: &[ChannelVector], w_hat: &[ChannelVector]) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::Incompatible(format!(
            "MAE pairs {} responses with {} generated ones",
            w.len(),
            w_hat.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::invalid("MAE of an empty set"));
    }
    let sum: f64 = w
        .iter()
        .zip(w_hat)
        .map(|(a, b)| a.0.iter().zip(&b.0).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>())
        .sum();
    Ok(sum / w.len() as f64)
}

/// MAE averaged over independent generation runs, each index-paired with `w`.
pub fn mae_over_runs(w: &[ChannelVector], runs: &[Vec<ChannelVector>]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::invalid("need at least one run"));
    }
    let mut total = 0.0;
    for r in runs {
        total += mae_channels(w, r)?;
    }
    Ok(total / runs.len() as f64)
}

/// Wasserstein distance between two random halves of the test responses.
pub fn original_baseline_wasserstein(test: &[ChannelVector], seed: u64) -> Result<f64> {
    if test.len() < 2 {
        return Err(Error::invalid("split-half baseline needs at least two responses"));
    }
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut seeded(seed));
    let half = test.len() / 2;
    let a: Vec<ChannelVector> = idx[..half].iter().map(|&i| test[i]).collect();
    let b: Vec<ChannelVector> = idx[half..2 * half].iter().map(|&i| test[i]).collect();
    wasserstein1_channels(&a, &b)
}

/// Random disjoint pairs of responses that share identical particle features.
pub fn duplicate_pairs(features: &[ParticleFeatures], seed: u64) -> Vec<(usize, usize)> {
    let mut groups: HashMap<[u32; NUM_FEATURES], Vec<usize>> = HashMap::new();
    for (i, f) in features.iter().enumerate() {
        groups.entry(f.key()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    // HashMap order is random; sort so the pairing depends on the seed alone
    groups.sort_unstable();
    let mut rng = seeded(seed);
    let mut pairs = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        pairs.extend(g.chunks_exact(2).map(|p| (p[0], p[1])));
    }
    pairs
}

/// MAE between responses to identical particles.
pub fn original_baseline_mae(features: &[ParticleFeatures], channels: &[ChannelVector], seed: u64) -> Result<f64> {
    if features.len() != channels.len() {
        return Err(Error::Incompatible("features and responses differ in length".into()));
    }
    let pairs = duplicate_pairs(features, seed);
    if pairs.is_empty() {
        return Err(Error::invalid("no pair of responses shares identical particle features"));
    }
    let a: Vec<ChannelVector> = pairs.iter().map(|&(i, _)| channels[i]).collect();
    let b: Vec<ChannelVector> = pairs.iter().map(|&(_, j)| channels[j]).collect();
    mae_channels(&a, &b)
}

/// Default number of generation runs averaged by [`evaluate_runs`].
pub const DEFAULT_RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean over runs of the channel Wasserstein distance.
    pub wasserstein: f64,
    pub wasserstein_runs: Vec<f64>,
    /// Mean over runs of the per-example MAE.
    pub mae: f64,
    pub mae_runs: Vec<f64>,
}

/// Scores `runs` generations (run `r` uses seed `r`) against `real`,
/// index-paired for the MAE.
pub fn evaluate_runs(
    real: &[ChannelVector],
    runs: usize,
    mut generate: impl FnMut(u64) -> Result<Vec<ChannelVector>>,
) -> Result<EvalSummary> {
    if runs == 0 {
        return Err(Error::invalid("need at least one run"));
    }
    let mut w = Vec::with_capacity(runs);
    let mut m = Vec::with_capacity(runs);
    for r in 0..runs {
        let generated = generate(r as u64)?;
        w.push(wasserstein1_channels(real, &generated)?);
        m.push(mae_channels(real, &generated)?);
    }
    Ok(EvalSummary {
        wasserstein: w.iter().sum::<f64>() / runs as f64,
        mae: m.iter().sum::<f64>() / runs as f64,
        wasserstein_runs: w,
        mae_runs: m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistogram {
    pub channel: usize,
    pub edges: Vec<f64>,
    pub original: Vec<u64>,
    pub generated: Vec<u64>,
}

/// Per-channel histograms of both sets on shared, equal-width bins.
pub fn emit_histograms(original: &[ChannelVector], generated: &[ChannelVector], bins: usize) -> Result<Vec<ChannelHistogram>> {
    if original.is_empty() || generated.is_empty() {
        return Err(Error::invalid("histograms need two non-empty sets"));
    }
    let bins = bins.max(1);
    Ok((0..NUM_CHANNELS)
        .map(|k| {
            let (o, g) = (column(original, k), column(generated, k));
            let lo = o.iter().chain(&g).copied().fold(f64::INFINITY, f64::min);
            let hi = o.iter().chain(&g).copied().fold(f64::NEG_INFINITY, f64::max);
            let hi = if hi > lo { hi } else { lo + 1.0 };
            let width = (hi - lo) / bins as f64;
            let count = |vals: &[f64]| {
                let mut c = vec![0u64; bins];
                for v in vals {
                    c[(((v - lo) / width) as usize).min(bins - 1)] += 1;
                }
                c
            };
            ChannelHistogram {
                channel: k + 1,
                edges: (0..=bins).map(|b| lo + width * b as f64).collect(),
                original: count(&o),
                generated: count(&g),
            }
        })
        .collect())
}

/// CSV with columns `channel,bin,lower,upper,original,generated`.
pub fn histograms_csv(hists: &[ChannelHistogram]) -> String {
    let mut out = String::from("channel,bin,lower,upper,original,generated\n");
    for h in hists {
        for b in 0..h.original.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                h.channel,
                b,
                h.edges[b],
                h.edges[b + 1],
                h.original[b],
                h.generated[b]
            );
        }
    }
    out
}
