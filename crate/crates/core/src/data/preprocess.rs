use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ParticleFeatures, NUM_FEATURES};
use crate::rng::seeded;
use crate::{Error, Result};

/// Disjoint train/validation/test index lists (70/10/20).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Random 70/10/20 partition of `0..n`.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(DatasetSplit {
        train: idx,
        val,
        test,
        seed,
    })
}

/// Per-feature standardization statistics, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
    /// Features whose training std was zero; their std is set to 1.
    pub constant: [bool; NUM_FEATURES],
    /// Whether images are fed to models as `ln(1 + x)`.
    pub log_transform: bool,
}

impl PreprocStats {
    /// Fits on `split.train` only; validation and test rows are never read.
    pub fn fit(ds: &Dataset, split: &DatasetSplit) -> Result<Self> {
        Self::fit_rows(split.train.iter().map(|&i| &ds.features()[i]))
    }

    pub fn fit_rows<'a>(rows: impl Iterator<Item = &'a ParticleFeatures>) -> Result<Self> {
        let rows: Vec<[f32; NUM_FEATURES]> = rows.map(ParticleFeatures::to_array).collect();
        if rows.is_empty() {
            return Err(Error::invalid("cannot fit statistics on zero rows"));
        }
        let n = rows.len() as f64;
        let mut mean = [0f64; NUM_FEATURES];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0f64; NUM_FEATURES];
        for r in &rows {
            for j in 0..NUM_FEATURES {
                std[j] += (r[j] as f64 - mean[j]).powi(2);
            }
        }
        let mut constant = [false; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            std[j] = (std[j] / n).sqrt();
            if !(std[j] > 1e-12) {
                std[j] = 1.0;
                constant[j] = true;
            }
        }
        Ok(Self {
            mean,
            std,
            constant,
            log_transform: true,
        })
    }

    pub fn standardize(&self, f: &ParticleFeatures) -> [f32; NUM_FEATURES] {
        let a = f.to_array();
        std::array::from_fn(|j| ((a[j] as f64 - self.mean[j]) / self.std[j]) as f32)
    }

    pub fn unstandardize(&self, z: &[f32; NUM_FEATURES]) -> ParticleFeatures {
        ParticleFeatures::from_array(std::array::from_fn(|j| (z[j] as f64 * self.std[j] + self.mean[j]) as f32))
    }

    /// Standardized rows, flattened `[n, 9]`.
    pub fn standardize_rows<'a>(&self, rows: impl Iterator<Item = &'a ParticleFeatures>) -> Vec<f32> {
        rows.flat_map(|f| self.standardize(f)).collect()
    }
}
