//! Conditional flow matching.
//!
//! Noise `x0 ~ N(0, I)` and data `x1` are joined by the straight path
//! `x_t = (1 − t)·x0 + t·x1`, whose velocity `x1 − x0` does not depend on
//! `t`. A network regresses that velocity; sampling integrates the learned
//! field from `t = 0` to `t = 1` with Euler steps on a uniform grid.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{
    inverse_transform_value, log_transform, Dataset, DatasetSplit, Detector, ParticleFeatures, PreprocStats,
    ShowerImage, NUM_FEATURES,
};
use crate::metrics::{extract_channels, evaluate_runs, wasserstein1_channels, ChannelVector, EvalSummary};
use crate::model::{Mlp, ModelCheckpoint, ModelKind, UNet, UNetConfig};
use crate::numerics::{
    cast_precision, collect_param_grads, round_to_f16, AdamConfig, AdamState, DType, Graph, ParamStore, Tensor, Var,
};
use crate::rng::{derive, seeded, Rng};
use crate::{par, Error, Result};

pub const DEFAULT_PIXEL_STEPS: usize = 11;
pub const DEFAULT_LATENT_STEPS: usize = 7;

/// Examples per independently sampled group: about `SAMPLE_GROUP_VALUES`
/// state values, clamped to `[8, 64]`. It depends only on the state size, so
/// results do not depend on the worker count. Larger groups amortize graph
/// setup and keep gemms wide on small states.
pub fn sample_group(state_len: usize) -> usize {
    (SAMPLE_GROUP_VALUES / state_len.max(1)).clamp(8, 64)
}

const SAMPLE_GROUP_VALUES: usize = 16_384;

/// Stream indices for `derive(seed, ·)`.
const VAL_STREAM: u64 = 0x5641_4c;
const INIT_STREAM: u64 = 0x494e_4954;

/// Uniform time grid `0 = t_0 < … < t_N = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FMSchedule {
    t_grid: Vec<f64>,
    dts: Vec<f64>,
}

impl FMSchedule {
    pub fn uniform(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let h = 1.0 / num_steps as f64;
        let mut dts = vec![h; num_steps];
        // the last step absorbs rounding so the steps sum to exactly 1
        let head: f64 = dts[..num_steps - 1].iter().sum();
        dts[num_steps - 1] = 1.0 - head;
        let mut t_grid: Vec<f64> = (0..num_steps).map(|i| i as f64 * h).collect();
        t_grid.push(1.0);
        Ok(Self { t_grid, dts })
    }

    pub fn num_steps(&self) -> usize {
        self.dts.len()
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn dts(&self) -> &[f64] {
        &self.dts
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = (1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<Tensor> {
    same_shape("interpolate", x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    let data = x0.data().iter().zip(x1.data()).map(|(&a, &b)| (1.0 - t) * a + t * b).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `v = x1 − x0`.
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    same_shape("target_velocity", x0, x1)?;
    let data = x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// A network predicting the flow velocity of a batch of states.
pub trait VelocityModel: Sync {
    /// Shape of one example's state, e.g. `[1, H, W]`.
    fn state_shape(&self) -> Vec<usize>;
    fn cond_dim(&self) -> usize;
    /// `x: [n, state…]`, one time per row, `cond: [n, cond_dim]`.
    fn velocity(&self, g: &mut Graph, x: Var, t: &[f32], cond: Var) -> Result<Var>;

    fn state_len(&self) -> usize {
        self.state_shape().iter().product()
    }
}

pub trait TrainableVelocity: VelocityModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl VelocityModel for UNet {
    fn state_shape(&self) -> Vec<usize> {
        let c = self.config();
        vec![c.in_channels, c.image_height, c.image_width]
    }

    fn cond_dim(&self) -> usize {
        self.config().cond_dim
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f32], cond: Var) -> Result<Var> {
        self.forward(g, x, t, cond)
    }
}

impl TrainableVelocity for UNet {
    fn params(&self) -> &ParamStore {
        UNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        UNet::params_mut(self)
    }
}

/// Dense velocity field over flat vectors (state ⊕ condition ⊕ time).
#[derive(Clone, Debug)]
pub struct MlpVelocity(pub Mlp);

impl VelocityModel for MlpVelocity {
    fn state_shape(&self) -> Vec<usize> {
        vec![self.0.config().input_dim]
    }

    fn cond_dim(&self) -> usize {
        self.0.config().cond_dim
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f32], cond: Var) -> Result<Var> {
        self.0.forward(g, x, Some(cond), Some(t))
    }
}

impl TrainableVelocity for MlpVelocity {
    fn params(&self) -> &ParamStore {
        self.0.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.0.params_mut()
    }
}

fn batch_shape(n: usize, state: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(state);
    s
}

/// Per-example time and noise for one CFM batch.
#[derive(Clone, Debug)]
pub struct CfmDraw {
    pub t: Vec<f32>,
    pub x0: Vec<f32>,
}

impl CfmDraw {
    /// `t ~ U[0, 1]` per example, then `x0 ~ N(0, I)`.
    pub fn sample(n: usize, state_len: usize, rng: &mut Rng) -> Self {
        let unit = Uniform::new_inclusive(0.0f32, 1.0);
        let t = (0..n).map(|_| unit.sample(rng)).collect();
        let x0 = (0..n * state_len).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, x0 }
    }
}

/// Records `Σ ‖net(x_t, t, c) − (x1 − x0)‖² / denom` for the examples of
/// `x1` (flattened states) on `g`.
pub fn record_cfm_loss<M: VelocityModel + ?Sized>(
    g: &mut Graph,
    net: &M,
    x1: &[f32],
    cond: &[f32],
    draw: &CfmDraw,
    denom: f64,
) -> Result<Var> {
    let state = net.state_shape();
    let len = net.state_len();
    let n = draw.t.len();
    if n == 0 {
        return Err(Error::invalid("CFM loss of an empty batch"));
    }
    if x1.len() != n * len || draw.x0.len() != n * len || cond.len() != n * net.cond_dim() {
        return Err(Error::shape("cfm_loss", format!("{} states, {} noise values, {} cond values for {n} examples", x1.len(), draw.x0.len(), cond.len())));
    }
    let mut xt = Vec::with_capacity(n * len);
    let mut target = Vec::with_capacity(n * len);
    for i in 0..n {
        let t = draw.t[i];
        for j in i * len..(i + 1) * len {
            xt.push((1.0 - t) * draw.x0[j] + t * x1[j]);
            target.push(x1[j] - draw.x0[j]);
        }
    }
    let shape = batch_shape(n, &state);
    let xv = g.constant(Tensor::new(shape.clone(), xt)?)?;
    let cv = g.constant(Tensor::new(vec![n, net.cond_dim()], cond.to_vec())?)?;
    let tv = g.constant(Tensor::new(shape, target)?)?;
    let pred = net.velocity(g, xv, &draw.t, cv)?;
    let diff = g.sub(pred, tv)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    g.scale(s, (1.0 / denom) as f32)
}

/// Mean CFM loss over a batch (`x1: [n, state…]`, `cond: [n, d]`).
pub fn cfm_loss<M: VelocityModel + ?Sized>(net: &M, x1: &Tensor, cond: &Tensor, rng: &mut Rng) -> Result<f32> {
    let n = x1.shape().first().copied().unwrap_or(0);
    if n == 0 || x1.numel() == 0 {
        return Err(Error::invalid("CFM loss of an empty batch"));
    }
    let draw = CfmDraw::sample(n, net.state_len(), rng);
    let mut g = Graph::inference(DType::F32);
    let l = record_cfm_loss(&mut g, net, x1.data(), cond.data(), &draw, x1.numel() as f64)?;
    g.value(l).item()
}

/// Loss and dense parameter gradients of one batch, accumulated over
/// `micro`-sized slices in a fixed order.
pub fn cfm_gradients<M: TrainableVelocity + ?Sized>(
    net: &M,
    x1: &[f32],
    cond: &[f32],
    draw: &CfmDraw,
    micro: usize,
) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let n = draw.t.len();
    let len = net.state_len();
    let cd = net.cond_dim();
    let denom = (n * len) as f64;
    let np = net.params().len();
    let mut acc: Vec<Option<Vec<f32>>> = vec![None; np];
    let mut loss = 0.0f64;
    for start in (0..n).step_by(micro.max(1)) {
        let end = (start + micro.max(1)).min(n);
        let sub = CfmDraw {
            t: draw.t[start..end].to_vec(),
            x0: draw.x0[start * len..end * len].to_vec(),
        };
        let mut g = Graph::new();
        let l = record_cfm_loss(&mut g, net, &x1[start * len..end * len], &cond[start * cd..end * cd], &sub, denom)?;
        loss += g.value(l).item()? as f64;
        let grads = g.backward(l)?;
        for (a, gr) in acc.iter_mut().zip(collect_param_grads(np, &grads)) {
            match (a.as_mut(), gr) {
                (Some(a), Some(gr)) => a.iter_mut().zip(gr).for_each(|(x, y)| *x += y),
                (None, Some(gr)) => *a = Some(gr),
                _ => {}
            }
        }
    }
    Ok((loss, acc))
}

/// Integrates from the given start states. The trajectory is accumulated in
/// f64; in f16 mode the state is additionally rounded to half precision
/// after each step.
pub fn euler_integrate<M: VelocityModel + ?Sized>(
    net: &M,
    x0: &Tensor,
    cond: &Tensor,
    schedule: &FMSchedule,
    precision: DType,
) -> Result<Tensor> {
    let state = net.state_shape();
    let len = net.state_len();
    let cd = net.cond_dim();
    let n = x0.shape().first().copied().unwrap_or(0);
    if x0.shape() != batch_shape(n, &state).as_slice() || cond.shape() != [n, cd] {
        return Err(Error::shape("euler_sample", format!("start {:?}, cond {:?}", x0.shape(), cond.shape())));
    }
    let group = sample_group(len);
    let parts = par::map(n.div_ceil(group), |gi| -> Result<Vec<f32>> {
        let (s, e) = (gi * group, ((gi + 1) * group).min(n));
        let m = e - s;
        let mut x: Vec<f64> = x0.data()[s * len..e * len].iter().map(|&v| v as f64).collect();
        let c = Tensor::new(vec![m, cd], cond.data()[s * cd..e * cd].to_vec())?;
        let c = cast_precision(&c, precision);
        for (k, (&t, &dt)) in schedule.t_grid().iter().zip(schedule.dts()).enumerate() {
            let mut g = Graph::inference(precision);
            let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let xv = g.constant(Tensor::new(batch_shape(m, &state), xs)?)?;
            let cv = g.constant(c.clone())?;
            let v = net.velocity(&mut g, xv, &vec![t as f32; m], cv).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged(format!("non-finite {op} at Euler step {k}")),
                other => other,
            })?;
            for (xi, &vi) in x.iter_mut().zip(g.value(v).data()) {
                *xi += dt * vi as f64;
                if precision == DType::F16 {
                    *xi = round_to_f16(*xi as f32) as f64;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite state after Euler step {k}")));
            }
        }
        Ok(x.into_iter().map(|v| v as f32).collect())
    });
    let mut out = Vec::with_capacity(n * len);
    for p in parts {
        out.extend(p?);
    }
    Tensor::new(batch_shape(n, &state), out)
}

/// Draws `x0 ~ N(0, I)` for every row of `cond` and integrates to `t = 1`.
pub fn euler_sample<M: VelocityModel + ?Sized>(
    net: &M,
    cond: &Tensor,
    schedule: &FMSchedule,
    rng: &mut Rng,
    precision: DType,
) -> Result<Tensor> {
    let n = cond.shape().first().copied().unwrap_or(0);
    let len = net.state_len();
    let x0 = Tensor::new(
        batch_shape(n, &net.state_shape()),
        (0..n * len).map(|_| StandardNormal.sample(rng)).collect(),
    )?;
    euler_integrate(net, &x0, cond, schedule, precision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FMTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Examples per forward/backward pass; gradients are accumulated.
    pub micro_batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Euler steps used for the per-epoch validation samples.
    pub val_steps: usize,
    /// Validate on at most this many validation rows (all if unset).
    pub val_limit: Option<usize>,
}

impl Default for FMTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            micro_batch: 32,
            adam: AdamConfig::default(),
            seed: 0,
            val_steps: DEFAULT_PIXEL_STEPS,
            val_limit: None,
        }
    }
}

impl FMTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch == 0 || self.val_steps == 0 {
            return Err(Error::invalid("epochs, batch_size, micro_batch and val_steps must be ≥ 1"));
        }
        self.adam.validate().or_else(|e| {
            // a zero cosine horizon is filled in from the epoch budget
            if self.adam.cosine_decay && self.adam.total_steps == 0 {
                Ok(())
            } else {
                Err(e)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_wasserstein: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_wasserstein: f64,
}

/// CSV with columns `epoch,loss,val_wasserstein`.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,val_wasserstein\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.loss, r.val_wasserstein);
    }
    out
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("non-finite value in {op}")),
        other => other,
    }
}

/// Trains `net` on flattened states `x1` with conditions `cond`, calling
/// `validate(net, epoch)` after every epoch. The parameters of the epoch
/// with the lowest validation score are restored at the end.
pub fn train_velocity<M: TrainableVelocity>(
    net: &mut M,
    x1: &[f32],
    cond: &[f32],
    cfg: &FMTrainConfig,
    mut validate: impl FnMut(&M, usize) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let len = net.state_len();
    let cd = net.cond_dim();
    let n = x1.len() / len.max(1);
    if n == 0 || x1.len() != n * len || cond.len() != n * cd {
        return Err(Error::shape("train", format!("{} state values and {} cond values", x1.len(), cond.len())));
    }
    let batches = n.div_ceil(cfg.batch_size);
    let mut adam_cfg = cfg.adam.clone();
    if adam_cfg.cosine_decay && adam_cfg.total_steps == 0 {
        adam_cfg.total_steps = (batches * cfg.epochs) as u64;
    }
    let mut adam = AdamState::new(adam_cfg, net.params())?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut bx = Vec::with_capacity(cfg.batch_size * len);
    let mut bc = Vec::with_capacity(cfg.batch_size * cd);
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive(cfg.seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            bc.clear();
            for &i in chunk {
                bx.extend_from_slice(&x1[i * len..(i + 1) * len]);
                bc.extend_from_slice(&cond[i * cd..(i + 1) * cd]);
            }
            let draw = CfmDraw::sample(chunk.len(), len, &mut rng);
            let (loss, grads) = cfm_gradients(net, &bx, &bc, &draw, cfg.micro_batch).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            adam.update(net.params_mut(), &grads)?;
            if !net.params().all_finite() {
                return Err(Error::Diverged(format!("non-finite parameters in epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let val = validate(net, epoch).map_err(diverged)?;
        trace.push(EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            val_wasserstein: val,
        });
        if val.is_finite() && best.as_ref().map_or(true, |b| val < b.1) {
            best = Some((epoch, val, net.params().clone()));
        }
    }
    let (best_epoch, best_val, params) =
        best.ok_or_else(|| Error::Diverged("no epoch produced a finite validation score".into()))?;
    *net.params_mut() = params;
    Ok(TrainOutcome {
        trace,
        best_epoch,
        best_val_wasserstein: best_val,
    })
}

/// Log-transformed images of `rows` as flattened `[n, 1, H, W]` states.
pub fn image_states(ds: &Dataset, rows: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * ds.detector().pixels());
    for &i in rows {
        out.extend(log_transform(ds.image(i)));
    }
    out
}

/// Standardized features of `rows`, `[n, 9]` row-major.
pub fn cond_rows(ds: &Dataset, rows: &[usize], stats: &PreprocStats) -> Vec<f32> {
    stats.standardize_rows(rows.iter().map(|&i| &ds.features()[i]))
}

pub fn channels_of(ds: &Dataset, rows: &[usize]) -> Vec<ChannelVector> {
    rows.iter().map(|&i| extract_channels(&ds.shower(i))).collect()
}

/// Rows used for per-epoch validation.
pub fn validation_rows(split: &DatasetSplit, limit: Option<usize>) -> Vec<usize> {
    let k = limit.unwrap_or(split.val.len()).min(split.val.len());
    split.val[..k].to_vec()
}

/// Converts a log-space state batch `[n, 1, H, W]` to photon-count images.
pub fn states_to_images(det: Detector, states: &Tensor) -> Result<Vec<ShowerImage>> {
    let p = det.pixels();
    states
        .data()
        .chunks(p)
        .map(|c| ShowerImage::new(det, c.iter().map(|&v| inverse_transform_value(v)).collect()))
        .collect()
}

/// A trained pixel-space generator: U-Net plus the feature statistics it
/// was trained with.
#[derive(Clone, Debug)]
pub struct PixelFm {
    pub unet: UNet,
    pub preproc: PreprocStats,
    pub detector: Detector,
}

impl PixelFm {
    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::UnetPixel)?;
        let cfg: UNetConfig = ck.config_as()?;
        let mut unet = UNet::build_unchecked(&cfg, 0)?;
        unet.load_params(ck.params.clone())?;
        let preproc = ck
            .preproc
            .clone()
            .ok_or_else(|| Error::Format("pixel checkpoint without preprocessing stats".into()))?;
        Ok(Self { unet, preproc, detector: ck.detector })
    }

    pub fn checkpoint(&self, seed: u64) -> Result<ModelCheckpoint> {
        let mut ck = ModelCheckpoint::new(ModelKind::UnetPixel, self.detector, self.unet.config(), self.unet.params().clone(), seed)?;
        ck.preproc = Some(self.preproc.clone());
        Ok(ck)
    }

    /// Log-space samples `[n, 1, H, W]`, one per feature row.
    pub fn sample_states(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Tensor> {
        sample_pixel_states(&self.unet, &self.preproc, features, steps, seed, precision)
    }

    pub fn sample_images(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ShowerImage>> {
        states_to_images(self.detector, &self.sample_states(features, steps, seed, precision)?)
    }

    pub fn sample_channels(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ChannelVector>> {
        sample_pixel_channels(&self.unet, &self.preproc, self.detector, features, steps, seed, precision)
    }
}

fn sample_pixel_states(
    unet: &UNet,
    preproc: &PreprocStats,
    features: &[ParticleFeatures],
    steps: usize,
    seed: u64,
    precision: DType,
) -> Result<Tensor> {
    let cond = Tensor::new(vec![features.len(), NUM_FEATURES], preproc.standardize_rows(features.iter()))?;
    euler_sample(unet, &cond, &FMSchedule::uniform(steps)?, &mut seeded(seed), precision)
}

fn sample_pixel_channels(
    unet: &UNet,
    preproc: &PreprocStats,
    det: Detector,
    features: &[ParticleFeatures],
    steps: usize,
    seed: u64,
    precision: DType,
) -> Result<Vec<ChannelVector>> {
    let states = sample_pixel_states(unet, preproc, features, steps, seed, precision)?;
    Ok(states_to_images(det, &states)?.iter().map(extract_channels).collect())
}

#[derive(Clone, Debug)]
pub struct FmTrainResult {
    pub model: PixelFm,
    pub checkpoint: ModelCheckpoint,
    pub outcome: TrainOutcome,
}

/// Trains a pixel-space FM model on the training rows of `split`, selecting
/// the epoch with the lowest validation Wasserstein distance.
pub fn train_fm(ds: &Dataset, split: &DatasetSplit, unet_cfg: &UNetConfig, cfg: &FMTrainConfig) -> Result<FmTrainResult> {
    let det = ds.detector();
    let (h, w) = det.dims();
    if (unet_cfg.image_height, unet_cfg.image_width, unet_cfg.in_channels) != (h, w, 1) {
        return Err(Error::Incompatible(format!(
            "{}x{}x{} model for {det} data",
            unet_cfg.image_height, unet_cfg.image_width, unet_cfg.in_channels
        )));
    }
    let preproc = PreprocStats::fit(ds, split)?;
    let x1 = image_states(ds, &split.train);
    let cond = cond_rows(ds, &split.train, &preproc);
    let val_rows = validation_rows(split, cfg.val_limit);
    let val_features: Vec<ParticleFeatures> = val_rows.iter().map(|&i| ds.features()[i]).collect();
    let val_channels = channels_of(ds, &val_rows);
    let mut unet = UNet::build(unet_cfg, derive(cfg.seed, INIT_STREAM))?;
    let val_seed = derive(cfg.seed, VAL_STREAM);
    let outcome = {
        let preproc = &preproc;
        train_velocity(&mut unet, &x1, &cond, cfg, |net, _| {
            let gen = sample_pixel_channels(net, preproc, det, &val_features, cfg.val_steps, val_seed, DType::F32)?;
            wasserstein1_channels(&val_channels, &gen)
        })?
    };
    let model = PixelFm { unet, preproc, detector: det };
    let mut checkpoint = model.checkpoint(cfg.seed)?;
    checkpoint.metadata.epochs = cfg.epochs;
    checkpoint.metadata.best_epoch = Some(outcome.best_epoch);
    checkpoint.metadata.best_val_wasserstein = Some(outcome.best_val_wasserstein);
    checkpoint.metadata.extra.insert("train".into(), serde_json::to_value(cfg)?);
    Ok(FmTrainResult { model, checkpoint, outcome })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub wasserstein: f64,
    pub mae: f64,
}

/// Evaluates a step-count-parameterized generator at every entry of
/// `steps`; `generate(steps, seed)` must return responses index-paired with
/// `real`.
pub fn sweep_steps(
    real: &[ChannelVector],
    steps: &[usize],
    runs: usize,
    mut generate: impl FnMut(usize, u64) -> Result<Vec<ChannelVector>>,
) -> Result<Vec<SweepRow>> {
    steps
        .iter()
        .map(|&s| {
            let EvalSummary { wasserstein, mae, .. } = evaluate_runs(real, runs, |seed| generate(s, seed))?;
            Ok(SweepRow { steps: s, wasserstein, mae })
        })
        .collect()
}

/// CSV with columns `steps,wasserstein,mae`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("steps,wasserstein,mae\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.steps, r.wasserstein, r.mae);
    }
    out
}

#[cfg(test)]
mod tests;
