//! Hyperparameter campaigns minimizing validation Wasserstein distance.
//!
//! Trials draw optimizer settings from a [`SearchStrategy`] (seeded random
//! search by default), train with a per-trial seed derived from the campaign
//! seed and the trial id, and are appended to a JSON-lines ledger as they
//! finish. A trial that diverges scores `+∞` and can never be selected.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Dataset, DatasetSplit};
use crate::flow_matching::{train_fm, FMTrainConfig};
use crate::model::{save_checkpoint, ModelCheckpoint, UNetConfig};
use crate::numerics::AdamConfig;
use crate::rng::{derive, seeded};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    /// Log-uniform bounds.
    pub lr: (f64, f64),
    pub beta1: (f64, f64),
    pub beta2: (f64, f64),
    pub cosine_decay: Vec<bool>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr: (1e-5, 1e-2),
            beta1: (0.5, 0.99),
            beta2: (0.9, 0.9999),
            cosine_decay: vec![true, false],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.lr) || self.lr.0 <= 0.0 {
            return Err(Error::invalid("lr bounds must satisfy 0 < lo ≤ hi"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !ok(b) || b.0 < 0.0 || b.1 >= 1.0 {
                return Err(Error::invalid(format!("{name} bounds must lie in [0, 1)")));
            }
        }
        if self.cosine_decay.is_empty() {
            return Err(Error::invalid("cosine_decay needs at least one option"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cosine_decay: bool,
}

impl TrialParams {
    pub fn apply(&self, adam: &AdamConfig) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            cosine_decay: self.cosine_decay,
            total_steps: 0,
            ..adam.clone()
        }
    }
}

/// Proposes the hyperparameters of a trial given the finished ones.
pub trait SearchStrategy {
    fn suggest(&mut self, trial_id: usize, history: &[TrialRecord]) -> TrialParams;
}

/// Independent draws; trial `i` depends only on the seed and `i`.
#[derive(Clone, Debug)]
pub struct RandomSearch {
    pub space: SearchSpace,
    pub seed: u64,
}

impl SearchStrategy for RandomSearch {
    fn suggest(&mut self, trial_id: usize, _: &[TrialRecord]) -> TrialParams {
        let s = &self.space;
        let mut rng = seeded(derive(self.seed, 0x5ea7_c400 + trial_id as u64));
        let (lo, hi) = (s.lr.0.ln(), s.lr.1.ln());
        TrialParams {
            lr: if hi > lo { rng.gen_range(lo..hi) } else { lo }.exp(),
            beta1: if s.beta1.1 > s.beta1.0 { rng.gen_range(s.beta1.0..s.beta1.1) } else { s.beta1.0 },
            beta2: if s.beta2.1 > s.beta2.0 { rng.gen_range(s.beta2.0..s.beta2.1) } else { s.beta2.0 },
            cosine_decay: s.cosine_decay[rng.gen_range(0..s.cosine_decay.len())],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Diverged,
}

/// JSON has no infinity; `+∞` is stored as `null`.
mod score {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub params: TrialParams,
    pub status: TrialStatus,
    #[serde(with = "score")]
    pub val_wasserstein: f64,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

/// Index of the record with the lowest finite score (ties: lowest trial id).
pub fn select_best(records: &[TrialRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.status == TrialStatus::Completed && r.val_wasserstein.is_finite())
        .min_by(|(_, a), (_, b)| a.val_wasserstein.total_cmp(&b.val_wasserstein).then(a.trial_id.cmp(&b.trial_id)))
        .map(|(i, _)| i)
}

#[derive(Clone, Debug)]
pub struct Campaign {
    pub records: Vec<TrialRecord>,
    pub best: usize,
    pub best_checkpoint: ModelCheckpoint,
}

impl Campaign {
    pub fn best_record(&self) -> &TrialRecord {
        &self.records[self.best]
    }
}

/// Append-only JSON-lines ledger.
pub struct Ledger {
    path: PathBuf,
    file: File,
}

impl Ledger {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_owned(), file })
    }

    pub fn append(&mut self, rec: &TrialRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Runs `n_trials` trials through `train(trial_id, params, seed)`, which
/// returns the validation score and checkpoint. `Error::Diverged` marks the
/// trial as diverged; any other error aborts the campaign.
pub fn run_trials(
    n_trials: usize,
    seed: u64,
    strategy: &mut dyn SearchStrategy,
    out_dir: Option<&Path>,
    mut train: impl FnMut(usize, &TrialParams, u64) -> Result<(f64, ModelCheckpoint)>,
) -> Result<Campaign> {
    if n_trials == 0 {
        return Err(Error::invalid("a campaign needs at least one trial"));
    }
    let mut ledger = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(Ledger::create(&d.join("trials.jsonl"))?)
        }
        None => None,
    };
    let mut records: Vec<TrialRecord> = Vec::with_capacity(n_trials);
    let mut best: Option<(f64, usize, ModelCheckpoint)> = None;
    for id in 0..n_trials {
        let params = strategy.suggest(id, &records);
        let trial_seed = derive(seed, id as u64);
        let start = Instant::now();
        let (status, score, checkpoint) = match train(id, &params, trial_seed) {
            Ok((score, ck)) if score.is_finite() => {
                let path = match out_dir {
                    Some(d) => {
                        let p = d.join(format!("trial_{id:04}.ckpt"));
                        save_checkpoint(&p, &ck)?;
                        Some(p)
                    }
                    None => None,
                };
                if best.as_ref().map_or(true, |b| score < b.0) {
                    best = Some((score, id, ck));
                }
                (TrialStatus::Completed, score, path)
            }
            Ok(_) | Err(Error::Diverged(_)) => (TrialStatus::Diverged, f64::INFINITY, None),
            Err(e) => return Err(e),
        };
        let rec = TrialRecord {
            trial_id: id,
            seed: trial_seed,
            params,
            status,
            val_wasserstein: score,
            checkpoint,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(l) = ledger.as_mut() {
            l.append(&rec)?;
        }
        records.push(rec);
    }
    let (_, best_id, best_checkpoint) = best.ok_or_else(|| Error::Diverged(format!("all {n_trials} trials diverged")))?;
    debug_assert_eq!(select_best(&records), Some(best_id));
    Ok(Campaign {
        records,
        best: best_id,
        best_checkpoint,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub n_trials: usize,
    pub seed: u64,
    pub space: SearchSpace,
    /// Template for every trial; optimizer fields and seed are overridden.
    pub train: FMTrainConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            n_trials: 20,
            seed: 0,
            space: SearchSpace::default(),
            train: FMTrainConfig {
                epochs: 10,
                ..FMTrainConfig::default()
            },
        }
    }
}

/// Random-search campaign over pixel-FM optimizer settings.
pub fn run_campaign(
    ds: &Dataset,
    split: &DatasetSplit,
    unet_cfg: &UNetConfig,
    cfg: &CampaignConfig,
    out_dir: Option<&Path>,
) -> Result<Campaign> {
    cfg.space.validate()?;
    let mut strategy = RandomSearch {
        space: cfg.space.clone(),
        seed: cfg.seed,
    };
    run_trials(cfg.n_trials, cfg.seed, &mut strategy, out_dir, |_, params, seed| {
        let train = FMTrainConfig {
            adam: params.apply(&cfg.train.adam),
            seed,
            ..cfg.train.clone()
        };
        let res = train_fm(ds, split, unet_cfg, &train)?;
        Ok((res.outcome.best_val_wasserstein, res.checkpoint))
    })
}

/// Empirical CDF of the trial scores: `(threshold, fraction ≤ threshold)` at
/// every distinct finite score. Diverged trials count in the denominator,
/// so the curve plateaus below 1 when any trial diverged.
pub fn wasserstein_cdf(records: &[TrialRecord]) -> Vec<(f64, f64)> {
    let n = records.len() as f64;
    let mut v: Vec<f64> = records.iter().map(|r| r.val_wasserstein).filter(|w| w.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &w) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == w => last.1 = frac,
            _ => out.push((w, frac)),
        }
    }
    out
}

/// CSV with columns `threshold,fraction`.
pub fn cdf_csv(cdf: &[(f64, f64)]) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in cdf {
        let _ = writeln!(out, "{t},{f}");
    }
    out
}
