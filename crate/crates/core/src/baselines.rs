//! Direct channel estimation: predict the five channel sums from the particle
//! features without generating an image.
//!
//! Regressors work on `ln(1 + c)` channel values and invert the transform for
//! evaluation, mirroring the image pipeline. The learned regressors (MLP and
//! the 5-dim flow-matching model) additionally standardize those targets.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit, Detector, ParticleFeatures, PreprocStats, NUM_FEATURES};
use crate::flow_matching::{
    channels_of, euler_sample, train_velocity, validation_rows, FMSchedule, FMTrainConfig, MlpVelocity, PixelFm,
    TrainOutcome, DEFAULT_PIXEL_STEPS,
};
use crate::metrics::{wasserstein1_channels, ChannelVector, NUM_CHANNELS};
use crate::model::{Mlp, MlpConfig, ModelCheckpoint, ModelKind};
use crate::numerics::{collect_param_grads, AdamConfig, AdamState, DType, Graph, ParamStore, Tensor};
use crate::rng::{derive, seeded};
use crate::{par, Error, Result};

/// Ridge damping of the normal equations.
pub const RIDGE_LAMBDA: f64 = 1e-6;
pub const MIN_FIT_ROWS: usize = 10;
pub const DEFAULT_K: usize = 5;

fn log_channels(c: &ChannelVector) -> [f64; NUM_CHANNELS] {
    c.0.map(|v| (v as f64).ln_1p())
}

fn unlog_channels(y: &[f64]) -> ChannelVector {
    ChannelVector(std::array::from_fn(|j| {
        let v = y[j].exp_m1();
        if v.is_finite() && v > 0.0 {
            v.round() as u64
        } else {
            0
        }
    }))
}

/// Multi-output least squares with an intercept, solved through the
/// ridge-damped normal equations `(XᵀX + λI) β = XᵀY`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `(inputs + 1) × outputs`, intercept row first.
    pub coef: Vec<Vec<f64>>,
}

impl LinearModel {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(format!("{} input rows for {} targets", x.len(), y.len())));
        }
        let d = x[0].len() + 1;
        let m = y[0].len();
        if x.iter().any(|r| r.len() + 1 != d) || y.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged regression rows"));
        }
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![vec![0.0; m]; d];
        let mut row = vec![1.0; d];
        for (xi, yi) in x.iter().zip(y) {
            row[1..].copy_from_slice(xi);
            for i in 0..d {
                for j in 0..=i {
                    a[i][j] += row[i] * row[j];
                }
                for k in 0..m {
                    b[i][k] += row[i] * yi[k];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                a[j][i] = a[i][j];
            }
            a[i][i] += lambda;
        }
        let l = cholesky(&a).ok_or_else(|| Error::invalid("normal equations are not positive definite"))?;
        let coef_t: Vec<Vec<f64>> = (0..m)
            .map(|k| cholesky_solve(&l, &b.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .collect();
        Ok(Self {
            coef: (0..d).map(|i| coef_t.iter().map(|c| c[i]).collect()).collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let m = self.coef[0].len();
        (0..m)
            .map(|k| self.coef[0][k] + x.iter().zip(&self.coef[1..]).map(|(v, c)| v * c[k]).sum::<f64>())
            .collect()
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Anything that maps particle features to channel responses.
pub trait ChannelPredictor: Sync {
    fn predict_channels(&self, features: &[ParticleFeatures], seed: u64) -> Result<Vec<ChannelVector>>;
}

impl ChannelPredictor for PixelFm {
    fn predict_channels(&self, features: &[ParticleFeatures], seed: u64) -> Result<Vec<ChannelVector>> {
        self.sample_channels(features, DEFAULT_PIXEL_STEPS, seed, DType::F32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Linear,
    Knn,
    Mlp,
    Fm5,
}

impl RegressorKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Knn => "knn",
            Self::Mlp => "mlp",
            Self::Fm5 => "fm5",
        }
    }
}

#[derive(Clone, Debug)]
enum Fitted {
    Linear(LinearModel),
    Knn {
        k: usize,
        points: Vec<[f32; NUM_FEATURES]>,
        channels: Vec<ChannelVector>,
    },
    Mlp {
        net: Mlp,
        target: TargetScale,
    },
    Fm5 {
        net: MlpVelocity,
        target: TargetScale,
        steps: usize,
    },
}

/// Per-channel standardization of log channel values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
}

impl TargetScale {
    fn fit(channels: &[ChannelVector]) -> Self {
        let n = channels.len().max(1) as f64;
        let logs: Vec<_> = channels.iter().map(log_channels).collect();
        let mean = std::array::from_fn(|j| logs.iter().map(|r| r[j]).sum::<f64>() / n);
        let std = std::array::from_fn(|j| {
            let v = logs.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v.sqrt() > 1e-9 {
                v.sqrt()
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    fn forward(&self, channels: &[ChannelVector]) -> Vec<f32> {
        channels
            .iter()
            .flat_map(|c| {
                let l = log_channels(c);
                (0..NUM_CHANNELS).map(move |j| ((l[j] - self.mean[j]) / self.std[j]) as f32)
            })
            .collect()
    }

    fn inverse(&self, z: &[f32]) -> Vec<ChannelVector> {
        z.chunks(NUM_CHANNELS)
            .map(|r| {
                let y: Vec<f64> = (0..NUM_CHANNELS).map(|j| r[j] as f64 * self.std[j] + self.mean[j]).collect();
                unlog_channels(&y)
            })
            .collect()
    }
}

/// A fitted direct-estimation model. Predictions are clamped to ≥ 0.
#[derive(Clone, Debug)]
pub struct ChannelRegressor {
    pub preproc: PreprocStats,
    fitted: Fitted,
}

impl ChannelRegressor {
    pub fn kind(&self) -> RegressorKind {
        match self.fitted {
            Fitted::Linear(_) => RegressorKind::Linear,
            Fitted::Knn { .. } => RegressorKind::Knn,
            Fitted::Mlp { .. } => RegressorKind::Mlp,
            Fitted::Fm5 { .. } => RegressorKind::Fm5,
        }
    }

    pub fn linear_model(&self) -> Option<&LinearModel> {
        match &self.fitted {
            Fitted::Linear(m) => Some(m),
            _ => None,
        }
    }

    fn standardized(&self, features: &[ParticleFeatures]) -> Vec<f32> {
        self.preproc.standardize_rows(features.iter())
    }

    /// Checkpoint of the MLP or 5-dim FM network; `None` for the
    /// non-parametric kinds.
    pub fn checkpoint(&self, detector: Detector, seed: u64) -> Result<Option<ModelCheckpoint>> {
        let (net, blob) = match &self.fitted {
            Fitted::Mlp { net, target } => (net, ChannelNetSpec {
                kind: RegressorKind::Mlp,
                mlp: net.config().clone(),
                target: target.clone(),
                steps: 0,
            }),
            Fitted::Fm5 { net, target, steps } => (&net.0, ChannelNetSpec {
                kind: RegressorKind::Fm5,
                mlp: net.0.config().clone(),
                target: target.clone(),
                steps: *steps,
            }),
            _ => return Ok(None),
        };
        let mut ck = ModelCheckpoint::new(ModelKind::MlpChannels, detector, &blob, net.params().clone(), seed)?;
        ck.preproc = Some(self.preproc.clone());
        Ok(Some(ck))
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::MlpChannels)?;
        let spec: ChannelNetSpec = ck.config_as()?;
        let mut net = Mlp::build(&spec.mlp, 0)?;
        net.load_params(ck.params.clone())?;
        let preproc = ck
            .preproc
            .clone()
            .ok_or_else(|| Error::Format("channel checkpoint without preprocessing stats".into()))?;
        let fitted = match spec.kind {
            RegressorKind::Mlp => Fitted::Mlp { net, target: spec.target },
            RegressorKind::Fm5 => Fitted::Fm5 {
                net: MlpVelocity(net),
                target: spec.target,
                steps: spec.steps,
            },
            k => return Err(Error::Format(format!("{} regressors have no checkpoint", k.label()))),
        };
        Ok(Self { preproc, fitted })
    }
}

/// Config blob of an `mlp_channels` checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNetSpec {
    pub kind: RegressorKind,
    pub mlp: MlpConfig,
    pub target: TargetScale,
    /// Euler steps for `fm5`.
    pub steps: usize,
}

impl ChannelPredictor for ChannelRegressor {
    fn predict_channels(&self, features: &[ParticleFeatures], seed: u64) -> Result<Vec<ChannelVector>> {
        match &self.fitted {
            Fitted::Linear(m) => Ok(features
                .iter()
                .map(|f| {
                    let z: Vec<f64> = self.preproc.standardize(f).iter().map(|&v| v as f64).collect();
                    unlog_channels(&m.predict(&z))
                })
                .collect()),
            Fitted::Knn { k, points, channels } => {
                let q = self.standardized(features);
                let picks = par::map(features.len(), |i| {
                    let query: &[f32] = &q[i * NUM_FEATURES..(i + 1) * NUM_FEATURES];
                    let near = nearest(points, query, *k);
                    let mut rng = seeded(derive(seed, i as u64));
                    near[rng.gen_range(0..near.len())]
                });
                Ok(picks.into_iter().map(|i| channels[i]).collect())
            }
            Fitted::Mlp { net, target } => {
                let n = features.len();
                let mut g = Graph::inference(DType::F32);
                let x = g.constant(Tensor::new(vec![n, NUM_FEATURES], self.standardized(features))?)?;
                let y = net.forward(&mut g, x, None, None)?;
                Ok(target.inverse(g.value(y).data()))
            }
            Fitted::Fm5 { net, target, steps } => {
                let cond = Tensor::new(vec![features.len(), NUM_FEATURES], self.standardized(features))?;
                let z = euler_sample(net, &cond, &FMSchedule::uniform(*steps)?, &mut seeded(seed), DType::F32)?;
                Ok(target.inverse(z.data()))
            }
        }
    }
}

/// Indices of the `k` nearest points by Euclidean distance, ties broken by
/// index, in increasing distance order.
pub fn nearest(points: &[[f32; NUM_FEATURES]], query: &[f32], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().zip(query).map(|(a, b)| ((a - b) as f64).powi(2)).sum(), i))
        .collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

fn check_rows(rows: &[usize]) -> Result<()> {
    if rows.len() < MIN_FIT_ROWS {
        return Err(Error::invalid(format!("need at least {MIN_FIT_ROWS} training rows, got {}", rows.len())));
    }
    Ok(())
}

/// Ordinary least squares from standardized features to log channels.
pub fn fit_linear(ds: &Dataset, split: &DatasetSplit) -> Result<ChannelRegressor> {
    check_rows(&split.train)?;
    let preproc = PreprocStats::fit(ds, split)?;
    let x: Vec<Vec<f64>> = split
        .train
        .iter()
        .map(|&i| preproc.standardize(&ds.features()[i]).iter().map(|&v| v as f64).collect())
        .collect();
    let y: Vec<Vec<f64>> = channels_of(ds, &split.train).iter().map(|c| log_channels(c).to_vec()).collect();
    Ok(ChannelRegressor {
        preproc,
        fitted: Fitted::Linear(LinearModel::fit(&x, &y, RIDGE_LAMBDA)?),
    })
}

/// Nearest-neighbour sampler: predictions are the channels of a uniformly
/// drawn neighbour among the `k` nearest training rows, which preserves the
/// spread of the responses rather than averaging it away.
pub fn fit_knn(ds: &Dataset, split: &DatasetSplit, k: usize) -> Result<ChannelRegressor> {
    if split.train.is_empty() {
        return Err(Error::invalid("kNN needs a non-empty training set"));
    }
    if k == 0 || k > split.train.len() {
        return Err(Error::invalid(format!("k = {k} for {} training rows", split.train.len())));
    }
    let preproc = PreprocStats::fit(ds, split)?;
    let points = split.train.iter().map(|&i| preproc.standardize(&ds.features()[i])).collect();
    Ok(ChannelRegressor {
        preproc,
        fitted: Fitted::Knn {
            k,
            points,
            channels: channels_of(ds, &split.train),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpTrainConfig {
    pub hidden: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 3,
            epochs: 30,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

fn mse(net: &Mlp, x: &[f32], y: &[f32]) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let n = x.len() / NUM_FEATURES;
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![n, NUM_FEATURES], x.to_vec())?)?;
    let yv = g.constant(Tensor::new(vec![n, NUM_CHANNELS], y.to_vec())?)?;
    let p = net.forward(&mut g, xv, None, None)?;
    let d = g.sub(p, yv)?;
    let d2 = g.square(d)?;
    let loss = g.mean(d2)?;
    let value = g.value(loss).item()? as f64;
    let grads = g.backward(loss)?;
    Ok((value, collect_param_grads(net.params().len(), &grads)))
}

fn gather<T: Copy>(src: &[T], width: usize, rows: &[usize]) -> Vec<T> {
    rows.iter().flat_map(|&i| src[i * width..(i + 1) * width].iter().copied()).collect()
}

/// Dense regression onto standardized log channels with an l2 loss; the
/// epoch with the lowest validation loss is kept.
pub fn train_mlp_channels(ds: &Dataset, split: &DatasetSplit, cfg: &MlpTrainConfig) -> Result<ChannelRegressor> {
    check_rows(&split.train)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be ≥ 1"));
    }
    let preproc = PreprocStats::fit(ds, split)?;
    let train_channels = channels_of(ds, &split.train);
    let target = TargetScale::fit(&train_channels);
    let x = preproc.standardize_rows(split.train.iter().map(|&i| &ds.features()[i]));
    let y = target.forward(&train_channels);
    let val = if split.val.is_empty() { &split.train } else { &split.val };
    let vx = preproc.standardize_rows(val.iter().map(|&i| &ds.features()[i]));
    let vy = target.forward(&channels_of(ds, val));
    let mcfg = MlpConfig {
        input_dim: NUM_FEATURES,
        cond_dim: 0,
        time_embed_dim: 0,
        hidden: cfg.hidden,
        depth: cfg.depth,
        output_dim: NUM_CHANNELS,
    };
    let mut net = Mlp::build(&mcfg, derive(cfg.seed, 1))?;
    let mut adam = AdamState::new(cfg.adam.clone(), net.params())?;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive(cfg.seed, 100 + epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = mse(&net, &gather(&x, NUM_FEATURES, chunk), &gather(&y, NUM_CHANNELS, chunk))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite regression loss in epoch {epoch}")));
            }
            adam.update(net.params_mut(), &grads)?;
        }
        let (vl, _) = mse(&net, &vx, &vy)?;
        if vl.is_finite() && best.as_ref().map_or(true, |b| vl < b.0) {
            best = Some((vl, net.params().clone()));
        }
    }
    let (_, params) = best.ok_or_else(|| Error::Diverged("no finite validation loss".into()))?;
    net.load_params(params)?;
    Ok(ChannelRegressor {
        preproc,
        fitted: Fitted::Mlp { net, target },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fm5Config {
    pub hidden: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Euler steps for validation and prediction.
    pub steps: usize,
    pub train: FMTrainConfig,
}

impl Default for Fm5Config {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 3,
            time_embed_dim: 16,
            steps: DEFAULT_PIXEL_STEPS,
            train: FMTrainConfig {
                epochs: 30,
                batch_size: 256,
                micro_batch: 256,
                ..FMTrainConfig::default()
            },
        }
    }
}

/// Conditional flow matching over standardized log channel vectors.
pub fn train_fm_channels(ds: &Dataset, split: &DatasetSplit, cfg: &Fm5Config) -> Result<(ChannelRegressor, TrainOutcome)> {
    check_rows(&split.train)?;
    let preproc = PreprocStats::fit(ds, split)?;
    let train_channels = channels_of(ds, &split.train);
    let target = TargetScale::fit(&train_channels);
    let x1 = target.forward(&train_channels);
    let cond = preproc.standardize_rows(split.train.iter().map(|&i| &ds.features()[i]));
    let mcfg = MlpConfig {
        input_dim: NUM_CHANNELS,
        cond_dim: NUM_FEATURES,
        time_embed_dim: cfg.time_embed_dim,
        hidden: cfg.hidden,
        depth: cfg.depth,
        output_dim: NUM_CHANNELS,
    };
    let mut net = MlpVelocity(Mlp::build(&mcfg, derive(cfg.train.seed, 1))?);
    let val_rows = validation_rows(split, cfg.train.val_limit);
    let val_rows = if val_rows.is_empty() { split.train.clone() } else { val_rows };
    let val_real = channels_of(ds, &val_rows);
    let val_cond = Tensor::new(
        vec![val_rows.len(), NUM_FEATURES],
        preproc.standardize_rows(val_rows.iter().map(|&i| &ds.features()[i])),
    )?;
    let schedule = FMSchedule::uniform(cfg.steps)?;
    let val_seed = derive(cfg.train.seed, 2);
    let outcome = train_velocity(&mut net, &x1, &cond, &cfg.train, |m, _| {
        let z = euler_sample(m, &val_cond, &schedule, &mut seeded(val_seed), DType::F32)?;
        wasserstein1_channels(&val_real, &target.inverse(z.data()))
    })?;
    let reg = ChannelRegressor {
        preproc,
        fitted: Fitted::Fm5 { net, target, steps: cfg.steps },
    };
    Ok((reg, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectRow {
    pub label: String,
    pub wasserstein: f64,
}

/// One Wasserstein row per predictor against the real test channels.
pub fn evaluate_direct(
    predictors: &[(&str, &dyn ChannelPredictor)],
    features: &[ParticleFeatures],
    real: &[ChannelVector],
    seed: u64,
) -> Result<Vec<DirectRow>> {
    predictors
        .iter()
        .map(|(label, p)| {
            let pred = p.predict_channels(features, seed)?;
            Ok(DirectRow {
                label: label.to_string(),
                wasserstein: wasserstein1_channels(real, &pred)?,
            })
        })
        .collect()
}

/// CSV with columns `model,wasserstein`.
pub fn direct_csv(rows: &[DirectRow]) -> String {
    let mut out = String::from("model,wasserstein\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.label, r.wasserstein);
    }
    out
}
