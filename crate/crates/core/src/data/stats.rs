use std::collections::{BTreeMap, HashSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Dataset, Detector, FEATURE_NAMES, NUM_FEATURES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistogram {
    pub feature: String,
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleType {
    pub mass: f32,
    pub charge: f32,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub detector: Detector,
    pub total_examples: usize,
    /// Distinct feature vectors under exact (bitwise) equality.
    pub unique_feature_vectors: usize,
    pub mean_photons: f64,
    pub histograms: Vec<FeatureHistogram>,
    /// Proportions per (mass, charge) pair, most frequent first.
    pub particle_types: Vec<ParticleType>,
}

pub fn dataset_stats(ds: &Dataset, bins: usize) -> DatasetStats {
    let bins = bins.max(1);
    let n = ds.len();
    let unique: HashSet<_> = ds.features().iter().map(|f| f.key()).collect();
    let rows: Vec<[f32; NUM_FEATURES]> = ds.features().iter().map(|f| f.to_array()).collect();
    let histograms = (0..NUM_FEATURES)
        .map(|j| {
            let col = rows.iter().map(|r| r[j] as f64);
            let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let (lo, hi) = if n == 0 {
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            };
            let width = (hi - lo) / bins as f64;
            let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
            let mut counts = vec![0u64; bins];
            for v in col {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            FeatureHistogram {
                feature: FEATURE_NAMES[j].to_string(),
                edges,
                counts,
            }
        })
        .collect();
    let mut types: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for f in ds.features() {
        *types.entry((f.m.to_bits(), f.q.to_bits())).or_default() += 1;
    }
    let mut particle_types: Vec<ParticleType> = types
        .into_iter()
        .map(|((m, q), count)| ParticleType {
            mass: f32::from_bits(m),
            charge: f32::from_bits(q),
            count,
            fraction: count as f64 / n.max(1) as f64,
        })
        .collect();
    particle_types.sort_by(|a, b| b.count.cmp(&a.count));
    let photons: u64 = ds.images().iter().map(|&p| p as u64).sum();
    DatasetStats {
        detector: ds.detector(),
        total_examples: n,
        unique_feature_vectors: unique.len(),
        mean_photons: photons as f64 / n.max(1) as f64,
        histograms,
        particle_types,
    }
}

impl DatasetStats {
    /// Long-format CSV: `feature,bin,lower,upper,count`.
    pub fn histograms_csv(&self) -> String {
        let mut out = String::from("feature,bin,lower,upper,count\n");
        for h in &self.histograms {
            for (b, c) in h.counts.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", h.feature, b, h.edges[b], h.edges[b + 1], c);
            }
        }
        out
    }
}
