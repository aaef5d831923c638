//! Two-stage latent flow matching.
//!
//! Stage one trains the VAE on a sum of loss terms, each divided by the norm
//! of its own gradient with respect to the input batch:
//!
//! ```text
//! L = L_vae/‖∇ₓL_vae‖ + L_perc/‖∇ₓL_perc‖ + L_adv/‖∇ₓL_adv‖
//! ```
//!
//! The norms are treated as constants, so one backward pass per term yields
//! both the norm and that term's parameter gradient. `L_perc` compares the
//! features of a frozen, randomly initialized convnet; `L_adv` is the hinge
//! generator loss against a small trainable discriminator.
//!
//! Stage two encodes every training image once (encoder mean), standardizes
//! the latents per channel and trains a U-Net velocity field on them.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit, Detector, ParticleFeatures, PreprocStats, ShowerImage, NUM_FEATURES};
use crate::flow_matching::{
    channels_of, cond_rows, euler_sample, image_states, states_to_images, train_velocity, validation_rows, FMSchedule,
    FMTrainConfig, TrainOutcome, DEFAULT_LATENT_STEPS,
};
use crate::metrics::{extract_channels, wasserstein1_channels, ChannelVector};
use crate::model::layers::{Conv, Init};
use crate::model::{ModelCheckpoint, ModelKind, UNet, UNetConfig, VAEConfig, Vae};
use crate::numerics::{collect_param_grads, AdamConfig, AdamState, DType, Graph, ParamStore, Tensor, Var};
use crate::rng::{derive, seeded};
use crate::{par, Error, Result};

pub const DEFAULT_BETA: f64 = 1e-2;
/// Seed of the frozen feature extractor.
pub const FEATURE_NET_SEED: u64 = 0x00fe_a7;

const FEATURE_SCOPE: u32 = 1;
const DISC_SCOPE: u32 = 2;
const ENCODE_CHUNK: usize = 64;

/// Frozen random convnet whose activations define the perceptual distance.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    params: ParamStore,
    convs: Vec<Conv>,
}

impl FeatureNet {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let convs = vec![
            Conv::new(&mut init, "f0", in_channels, 8, 3, 1),
            Conv::new(&mut init, "f1", 8, 16, 3, 2),
            Conv::new(&mut init, "f2", 16, 16, 3, 2),
        ];
        Self { params, convs }
    }

    /// Activations after every layer.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        g.with_scope(FEATURE_SCOPE, true, |g| {
            let mut h = x;
            let mut out = Vec::with_capacity(self.convs.len());
            for c in &self.convs {
                h = c.forward(g, &self.params, h)?;
                h = g.silu(h)?;
                out.push(h);
            }
            Ok(out)
        })
    }
}

/// Four-layer convolutional patch discriminator. SiLU keeps the generator's
/// adversarial term smooth in the VAE parameters.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamStore,
    convs: Vec<Conv>,
}

impl Discriminator {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let convs = vec![
            Conv::new(&mut init, "d0", in_channels, 8, 3, 2),
            Conv::new(&mut init, "d1", 8, 16, 3, 2),
            Conv::new(&mut init, "d2", 16, 16, 3, 1),
            Conv::new(&mut init, "d3", 16, 1, 3, 1),
        ];
        Self { params, convs }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Patch logits `[n, 1, h', w']`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, &self.params, h)?;
            if i + 1 < self.convs.len() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeLossConfig {
    /// KL weight inside `L_vae`.
    pub beta: f64,
    pub perceptual: bool,
    pub adversarial: bool,
    /// Constant factors applied to `[L_vae, L_perc, L_adv]`; the gradient
    /// normalization cancels them.
    pub term_scales: [f64; 3],
}

impl Default for VaeLossConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            perceptual: true,
            adversarial: true,
            term_scales: [1.0; 3],
        }
    }
}

/// Values of one gradient-normalized VAE loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VAELossTerms {
    pub l_vae: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_perc: Option<f64>,
    pub l_adv: Option<f64>,
    /// `‖∇ₓL_i‖` for `[L_vae, L_perc, L_adv]`; `None` for inactive terms.
    pub grad_norms: [Option<f64>; 3],
    /// `L_i / ‖∇ₓL_i‖` per term (0 for skipped terms).
    pub normalized: [f64; 3],
    pub total: f64,
}

struct TermVars {
    x: Var,
    rec: Var,
    kl: Var,
    terms: [Option<Var>; 3],
    recon: Var,
}

/// Records the three loss terms for batch `x` with reparameterization noise
/// `eps` (same shape as the latent).
fn record_terms(
    g: &mut Graph,
    vae: &Vae,
    feat: &FeatureNet,
    disc: Option<&Discriminator>,
    x: &Tensor,
    eps: &Tensor,
    cfg: &VaeLossConfig,
) -> Result<TermVars> {
    let n = x.shape()[0] as f32;
    let xv = g.leaf(x.clone().with_grad())?;
    let (mu, logvar) = vae.encode(g, xv)?;
    let e = g.constant(eps.clone())?;
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, e)?;
    let z = g.add(mu, noise)?;
    let recon = vae.decode(g, z)?;

    let d = g.sub(xv, recon)?;
    let d2 = g.square(d)?;
    let rec = g.sum(d2)?;
    let rec = g.scale(rec, 1.0 / n)?;
    // KL(N(mu, σ²) ‖ N(0, 1)) = ½ Σ (mu² + σ² − 1 − log σ²)
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let k = g.add(mu2, var)?;
    let k = g.sub(k, logvar)?;
    let k = g.add_scalar(k, -1.0)?;
    let kl = g.sum(k)?;
    let kl = g.scale(kl, 0.5 / n)?;
    let bkl = g.scale(kl, cfg.beta as f32)?;
    let l_vae = g.add(rec, bkl)?;
    let l_vae = g.scale(l_vae, cfg.term_scales[0] as f32)?;

    let l_perc = if cfg.perceptual {
        let fa = feat.features(g, xv)?;
        let fb = feat.features(g, recon)?;
        let mut acc: Option<Var> = None;
        for (a, b) in fa.into_iter().zip(fb) {
            let d = g.sub(a, b)?;
            let d2 = g.square(d)?;
            let m = g.mean(d2)?;
            acc = Some(match acc {
                Some(s) => g.add(s, m)?,
                None => m,
            });
        }
        let p = acc.expect("feature net has layers");
        Some(g.scale(p, cfg.term_scales[1] as f32)?)
    } else {
        None
    };

    let l_adv = match (cfg.adversarial, disc) {
        (true, Some(d)) => {
            let logits = g.with_scope(DISC_SCOPE, true, |g| d.logits(g, recon))?;
            let m = g.mean(logits)?;
            Some(g.scale(m, -(cfg.term_scales[2] as f32))?)
        }
        _ => None,
    };
    Ok(TermVars {
        x: xv,
        rec,
        kl,
        terms: [Some(l_vae), l_perc, l_adv],
        recon,
    })
}

/// Norms below this count as a vanished gradient; the term is skipped.
const MIN_GRAD_NORM: f64 = 1e-12;

/// Evaluates the gradient-normalized loss and the VAE parameter gradient of
/// `Σ L_i / ‖∇ₓL_i‖`.
pub fn vae_loss_gradnorm(
    vae: &Vae,
    feat: &FeatureNet,
    disc: Option<&Discriminator>,
    x: &Tensor,
    eps: &Tensor,
    cfg: &VaeLossConfig,
) -> Result<(VAELossTerms, Vec<Option<Vec<f32>>>, Tensor)> {
    if x.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("VAE loss of an empty batch"));
    }
    let mut g = Graph::new();
    let tv = record_terms(&mut g, vae, feat, disc, x, eps, cfg)?;
    let np = vae.params().len();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; np];
    let mut norms = [None; 3];
    let mut normalized = [0.0; 3];
    let mut values = [None; 3];
    for (i, term) in tv.terms.iter().enumerate() {
        let Some(term) = *term else { continue };
        let value = g.value(term).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "vae_loss" });
        }
        values[i] = Some(value);
        let gr = g.backward(term)?;
        let norm = gr.norm(tv.x);
        norms[i] = Some(norm);
        if !(norm > MIN_GRAD_NORM) {
            continue;
        }
        normalized[i] = value / norm;
        let inv = (1.0 / norm) as f32;
        for (acc, pg) in grads.iter_mut().zip(collect_param_grads(np, &gr)) {
            let Some(pg) = pg else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(pg).for_each(|(a, v)| *a += inv * v),
                None => *acc = Some(pg.into_iter().map(|v| inv * v).collect()),
            }
        }
    }
    let terms = VAELossTerms {
        l_vae: values[0].unwrap_or(0.0),
        l_rec: g.value(tv.rec).item()? as f64,
        l_kl: g.value(tv.kl).item()? as f64,
        l_perc: values[1],
        l_adv: values[2],
        grad_norms: norms,
        total: normalized.iter().sum(),
        normalized,
    };
    Ok((terms, grads, g.value(tv.recon).clone()))
}

/// `[L_vae, L_perc, L_adv]` without gradients (inactive terms are 0).
pub fn vae_loss_terms(
    vae: &Vae,
    feat: &FeatureNet,
    disc: Option<&Discriminator>,
    x: &Tensor,
    eps: &Tensor,
    cfg: &VaeLossConfig,
) -> Result<[f64; 3]> {
    let mut g = Graph::new();
    let tv = record_terms(&mut g, vae, feat, disc, x, eps, cfg)?;
    let mut out = [0.0; 3];
    for (o, t) in out.iter_mut().zip(tv.terms) {
        if let Some(t) = t {
            *o = g.value(t).item()? as f64;
        }
    }
    Ok(out)
}

/// Hinge loss of the discriminator and its parameter gradients.
pub fn discriminator_step(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let mut g = Graph::new();
    let r = g.constant(real.clone())?;
    let f = g.constant(fake.clone())?;
    let lr = disc.logits(&mut g, r)?;
    let lf = disc.logits(&mut g, f)?;
    // mean(relu(1 − D(x))) + mean(relu(1 + D(x̂)))
    let a = g.scale(lr, -1.0)?;
    let a = g.add_scalar(a, 1.0)?;
    let a = g.relu(a)?;
    let a = g.mean(a)?;
    let b = g.add_scalar(lf, 1.0)?;
    let b = g.relu(b)?;
    let b = g.mean(b)?;
    let loss = g.add(a, b)?;
    let value = g.value(loss).item()? as f64;
    let grads = g.backward(loss)?;
    Ok((value, collect_param_grads(disc.params().len(), &grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub disc_adam: AdamConfig,
    pub loss: VaeLossConfig,
    /// First epoch in which the adversarial term is active.
    pub adv_start_epoch: usize,
    pub seed: u64,
    pub val_limit: Option<usize>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            disc_adam: AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            },
            loss: VaeLossConfig::default(),
            adv_start_epoch: 2,
            seed: 0,
            val_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub rec: f64,
    pub kl: f64,
    pub disc_loss: f64,
    pub val_wasserstein: f64,
}

/// CSV with columns `epoch,loss,rec,kl,disc_loss,val_wasserstein`.
pub fn vae_trace_csv(trace: &[VaeEpochRecord]) -> String {
    let mut out = String::from("epoch,loss,rec,kl,disc_loss,val_wasserstein\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.epoch, r.loss, r.rec, r.kl, r.disc_loss, r.val_wasserstein);
    }
    out
}

fn image_batch(det: Detector, states: &[f32]) -> Result<Tensor> {
    let (h, w) = det.dims();
    Tensor::new(vec![states.len() / (h * w), 1, h, w], states.to_vec())
}

/// Encoder means for the given log-space images, computed in fixed chunks.
pub fn encode_mean(vae: &Vae, states: &[f32]) -> Result<Tensor> {
    let cfg = vae.config();
    let len = cfg.image_height * cfg.image_width * cfg.in_channels;
    let n = states.len() / len;
    let [lc, lh, lw] = cfg.latent_shape();
    let parts = par::map(n.div_ceil(ENCODE_CHUNK), |c| -> Result<Vec<f32>> {
        let (s, e) = (c * ENCODE_CHUNK, ((c + 1) * ENCODE_CHUNK).min(n));
        let mut g = Graph::inference(DType::F32);
        let x = g.constant(Tensor::new(
            vec![e - s, cfg.in_channels, cfg.image_height, cfg.image_width],
            states[s * len..e * len].to_vec(),
        )?)?;
        let (mu, _) = vae.encode(&mut g, x)?;
        Ok(g.value(mu).data().to_vec())
    });
    let mut out = Vec::with_capacity(n * lc * lh * lw);
    for p in parts {
        out.extend(p?);
    }
    Tensor::new(vec![n, lc, lh, lw], out)
}

/// Decodes latents `[n, c, h, w]` in fixed chunks.
pub fn decode_latents(vae: &Vae, z: &Tensor, precision: DType) -> Result<Tensor> {
    let cfg = vae.config();
    let [lc, lh, lw] = cfg.latent_shape();
    let per = lc * lh * lw;
    let n = z.shape()[0];
    let img = cfg.in_channels * cfg.image_height * cfg.image_width;
    let parts = par::map(n.div_ceil(ENCODE_CHUNK), |c| -> Result<Vec<f32>> {
        let (s, e) = (c * ENCODE_CHUNK, ((c + 1) * ENCODE_CHUNK).min(n));
        let mut g = Graph::inference(precision);
        let zv = g.constant(Tensor::new(vec![e - s, lc, lh, lw], z.data()[s * per..e * per].to_vec())?)?;
        let x = vae.decode(&mut g, zv)?;
        Ok(g.value(x).data().to_vec())
    });
    let mut out = Vec::with_capacity(n * img);
    for p in parts {
        out.extend(p?);
    }
    Tensor::new(vec![n, cfg.in_channels, cfg.image_height, cfg.image_width], out)
}

/// Channels of `decode(encode_mean(x))` for the given rows.
pub fn reconstruct_channels(vae: &Vae, ds: &Dataset, rows: &[usize]) -> Result<Vec<ChannelVector>> {
    let states = image_states(ds, rows);
    let z = encode_mean(vae, &states)?;
    let x = decode_latents(vae, &z, DType::F32)?;
    Ok(states_to_images(ds.detector(), &x)?.iter().map(extract_channels).collect())
}

/// Wasserstein distance between the rows' channels and those of their
/// reconstructions.
pub fn reconstruction_wasserstein(vae: &Vae, ds: &Dataset, rows: &[usize]) -> Result<f64> {
    wasserstein1_channels(&channels_of(ds, rows), &reconstruct_channels(vae, ds, rows)?)
}

#[derive(Clone, Debug)]
pub struct VaeTrainResult {
    pub vae: Vae,
    pub checkpoint: ModelCheckpoint,
    pub trace: Vec<VaeEpochRecord>,
    pub best_epoch: usize,
    pub best_val_wasserstein: f64,
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("non-finite value in {op}")),
        other => other,
    }
}

/// Trains the VAE, keeping the epoch with the best validation
/// reconstruction Wasserstein distance.
pub fn train_vae(ds: &Dataset, split: &DatasetSplit, vae_cfg: &VAEConfig, cfg: &VaeTrainConfig) -> Result<VaeTrainResult> {
    let det = ds.detector();
    let (h, w) = det.dims();
    if (vae_cfg.image_height, vae_cfg.image_width, vae_cfg.in_channels) != (h, w, 1) {
        return Err(Error::Incompatible(format!("{}x{} VAE for {det} data", vae_cfg.image_height, vae_cfg.image_width)));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be ≥ 1"));
    }
    let mut vae = Vae::build(vae_cfg, derive(cfg.seed, 1))?;
    let feat = FeatureNet::new(1, FEATURE_NET_SEED);
    let mut disc = Discriminator::new(1, derive(cfg.seed, 2));
    let n = split.train.len();
    // a zero cosine horizon is filled in from the epoch budget
    let horizon = |mut c: AdamConfig| {
        if c.cosine_decay && c.total_steps == 0 {
            c.total_steps = (n.div_ceil(cfg.batch_size) * cfg.epochs) as u64;
        }
        c
    };
    let mut adam = AdamState::new(horizon(cfg.adam.clone()), vae.params())?;
    let mut dadam = AdamState::new(horizon(cfg.disc_adam.clone()), disc.params())?;
    let states = image_states(ds, &split.train);
    let len = h * w;
    let [lc, lh, lw] = vae_cfg.latent_shape();
    let val_rows = validation_rows(split, cfg.val_limit);
    let val_channels = channels_of(ds, &val_rows);
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive(cfg.seed, 100 + epoch as u64));
        order.shuffle(&mut rng);
        let adv_on = cfg.loss.adversarial && epoch >= cfg.adv_start_epoch;
        let loss_cfg = VaeLossConfig { adversarial: adv_on, ..cfg.loss.clone() };
        let (mut tot, mut rec, mut kl, mut dl) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut bx = Vec::with_capacity(chunk.len() * len);
            for &i in chunk {
                bx.extend_from_slice(&states[i * len..(i + 1) * len]);
            }
            let x = image_batch(det, &bx)?;
            let eps = Tensor::from_fn(vec![chunk.len(), lc, lh, lw], |_| StandardNormal.sample(&mut rng));
            let (terms, grads, recon) =
                vae_loss_gradnorm(&vae, &feat, adv_on.then_some(&disc), &x, &eps, &loss_cfg).map_err(diverged)?;
            adam.update(vae.params_mut(), &grads)?;
            if !vae.params().all_finite() {
                return Err(Error::Diverged(format!("non-finite VAE parameters in epoch {epoch}")));
            }
            if adv_on {
                let (d, dg) = discriminator_step(&disc, &x, &recon).map_err(diverged)?;
                dadam.update(disc.params_mut(), &dg)?;
                dl += d * chunk.len() as f64;
            }
            let k = chunk.len() as f64;
            tot += terms.total * k;
            rec += terms.l_rec * k;
            kl += terms.l_kl * k;
        }
        let val = wasserstein1_channels(&val_channels, &reconstruct_channels(&vae, ds, &val_rows)?)?;
        let nf = n as f64;
        trace.push(VaeEpochRecord {
            epoch,
            loss: tot / nf,
            rec: rec / nf,
            kl: kl / nf,
            disc_loss: dl / nf,
            val_wasserstein: val,
        });
        if val.is_finite() && best.as_ref().map_or(true, |b| val < b.1) {
            best = Some((epoch, val, vae.params().clone()));
        }
    }
    let (best_epoch, best_val, params) = best.ok_or_else(|| Error::Diverged("no finite validation score".into()))?;
    vae.load_params(params)?;
    let mut checkpoint = ModelCheckpoint::new(ModelKind::Vae, det, vae_cfg, vae.params().clone(), cfg.seed)?;
    checkpoint.metadata.epochs = cfg.epochs;
    checkpoint.metadata.best_epoch = Some(best_epoch);
    checkpoint.metadata.best_val_wasserstein = Some(best_val);
    checkpoint.metadata.extra.insert("train".into(), serde_json::to_value(cfg)?);
    Ok(VaeTrainResult {
        vae,
        checkpoint,
        trace,
        best_epoch,
        best_val_wasserstein: best_val,
    })
}

pub fn vae_from_checkpoint(ck: &ModelCheckpoint) -> Result<Vae> {
    ck.expect_kind(ModelKind::Vae)?;
    let cfg: VAEConfig = ck.config_as()?;
    let mut vae = Vae::build_unchecked(&cfg, 0)?;
    vae.load_params(ck.params.clone())?;
    Ok(vae)
}

/// Config blob of a latent FM checkpoint: the U-Net plus the per-channel
/// latent standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub unet: UNetConfig,
    pub latent_mean: Vec<f32>,
    pub latent_std: Vec<f32>,
}

/// U-Net config for the latent grid of `vae_cfg`, starting from `base`'s
/// widths. One down level suffices for the small latent grids.
pub fn latent_unet_config(base: &UNetConfig, vae_cfg: &VAEConfig) -> UNetConfig {
    let [c, h, w] = vae_cfg.latent_shape();
    UNetConfig {
        image_height: h,
        image_width: w,
        in_channels: c,
        ..base.clone()
    }
}

fn latent_stats(z: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = <[usize; 4]>::try_from(z.shape()).expect("latent batch");
    let plane = h * w;
    let mut mean = vec![0.0f32; c];
    let mut std = vec![1.0f32; c];
    for ch in 0..c {
        let vals = (0..n).flat_map(|i| z.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter());
        let (mut s, mut s2, mut k) = (0.0f64, 0.0f64, 0.0f64);
        for &v in vals {
            s += v as f64;
            s2 += (v as f64).powi(2);
            k += 1.0;
        }
        let m = s / k;
        mean[ch] = m as f32;
        let sd = (s2 / k - m * m).max(0.0).sqrt();
        std[ch] = if sd > 1e-6 { sd as f32 } else { 1.0 };
    }
    (mean, std)
}

fn normalize_latents(z: &mut Tensor, mean: &[f32], std: &[f32], forward: bool) {
    let c = mean.len();
    let plane = z.shape()[2] * z.shape()[3];
    for (i, chunk) in z.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = if forward { (*v - mean[ch]) / std[ch] } else { *v * std[ch] + mean[ch] };
        }
    }
}

/// End-to-end latent generator: latent U-Net, VAE decoder, feature stats.
#[derive(Clone, Debug)]
pub struct LatentFm {
    pub vae: Vae,
    pub unet: UNet,
    pub spec: LatentSpec,
    pub preproc: PreprocStats,
    pub detector: Detector,
}

impl LatentFm {
    pub fn from_checkpoints(vae_ck: &ModelCheckpoint, fm_ck: &ModelCheckpoint) -> Result<Self> {
        fm_ck.expect_kind(ModelKind::UnetLatent)?;
        let vae = vae_from_checkpoint(vae_ck)?;
        if vae_ck.detector != fm_ck.detector {
            return Err(Error::Incompatible(format!(
                "VAE for {} but latent model for {}",
                vae_ck.detector, fm_ck.detector
            )));
        }
        let spec: LatentSpec = fm_ck.config_as()?;
        let [c, h, w] = vae.config().latent_shape();
        let u = &spec.unet;
        if (u.in_channels, u.image_height, u.image_width) != (c, h, w) || spec.latent_mean.len() != c || spec.latent_std.len() != c {
            return Err(Error::Incompatible(format!(
                "latent model over {}x{}x{}, VAE latents are {c}x{h}x{w}",
                u.in_channels, u.image_height, u.image_width
            )));
        }
        let mut unet = UNet::build_unchecked(&spec.unet, 0)?;
        unet.load_params(fm_ck.params.clone())?;
        let preproc = fm_ck
            .preproc
            .clone()
            .ok_or_else(|| Error::Format("latent checkpoint without preprocessing stats".into()))?;
        Ok(Self { vae, unet, spec, preproc, detector: fm_ck.detector })
    }

    /// Euler-samples latents, decodes them and inverts the pixel transform.
    pub fn sample_images(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ShowerImage>> {
        latent_sample_images(&self.vae, &self.unet, &self.spec, &self.preproc, self.detector, features, steps, seed, precision)
    }

    pub fn sample_channels(&self, features: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ChannelVector>> {
        Ok(self.sample_images(features, steps, seed, precision)?.iter().map(extract_channels).collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn latent_sample_images(
    vae: &Vae,
    unet: &UNet,
    spec: &LatentSpec,
    preproc: &PreprocStats,
    det: Detector,
    features: &[ParticleFeatures],
    steps: usize,
    seed: u64,
    precision: DType,
) -> Result<Vec<ShowerImage>> {
    let cond = Tensor::new(vec![features.len(), NUM_FEATURES], preproc.standardize_rows(features.iter()))?;
    let mut z = euler_sample(unet, &cond, &FMSchedule::uniform(steps)?, &mut seeded(seed), precision)?;
    normalize_latents(&mut z, &spec.latent_mean, &spec.latent_std, false);
    let x = decode_latents(vae, &z, precision)?;
    states_to_images(det, &x)
}

/// `latent_sample` with default arguments: one image per feature row.
pub fn latent_sample(
    vae_ck: &ModelCheckpoint,
    fm_ck: &ModelCheckpoint,
    features: &[ParticleFeatures],
    schedule_steps: Option<usize>,
    seed: u64,
) -> Result<Vec<ShowerImage>> {
    LatentFm::from_checkpoints(vae_ck, fm_ck)?.sample_images(features, schedule_steps.unwrap_or(DEFAULT_LATENT_STEPS), seed, DType::F32)
}

#[derive(Clone, Debug)]
pub struct LatentTrainResult {
    pub model: LatentFm,
    pub checkpoint: ModelCheckpoint,
    pub outcome: TrainOutcome,
}

/// Trains flow matching over cached, standardized encoder means.
pub fn train_latent_fm(
    vae_ck: &ModelCheckpoint,
    ds: &Dataset,
    split: &DatasetSplit,
    unet_base: &UNetConfig,
    cfg: &FMTrainConfig,
) -> Result<LatentTrainResult> {
    let vae = vae_from_checkpoint(vae_ck)?;
    if vae_ck.detector != ds.detector() {
        return Err(Error::Incompatible(format!("VAE for {}, data from {}", vae_ck.detector, ds.detector())));
    }
    let det = ds.detector();
    let preproc = PreprocStats::fit(ds, split)?;
    let mut z = encode_mean(&vae, &image_states(ds, &split.train))?;
    let (latent_mean, latent_std) = latent_stats(&z);
    normalize_latents(&mut z, &latent_mean, &latent_std, true);
    let spec = LatentSpec {
        unet: latent_unet_config(unet_base, vae.config()),
        latent_mean,
        latent_std,
    };
    let cond = cond_rows(ds, &split.train, &preproc);
    let val_rows = validation_rows(split, cfg.val_limit);
    let val_features: Vec<ParticleFeatures> = val_rows.iter().map(|&i| ds.features()[i]).collect();
    let val_channels = channels_of(ds, &val_rows);
    let mut unet = UNet::build(&spec.unet, derive(cfg.seed, 3))?;
    let val_seed = derive(cfg.seed, 4);
    let outcome = train_velocity(&mut unet, z.data(), &cond, cfg, |net, _| {
        let imgs = latent_sample_images(&vae, net, &spec, &preproc, det, &val_features, cfg.val_steps, val_seed, DType::F32)?;
        let gen: Vec<ChannelVector> = imgs.iter().map(extract_channels).collect();
        wasserstein1_channels(&val_channels, &gen)
    })?;
    let mut checkpoint = ModelCheckpoint::new(ModelKind::UnetLatent, det, &spec, unet.params().clone(), cfg.seed)?;
    checkpoint.preproc = Some(preproc.clone());
    checkpoint.metadata.epochs = cfg.epochs;
    checkpoint.metadata.best_epoch = Some(outcome.best_epoch);
    checkpoint.metadata.best_val_wasserstein = Some(outcome.best_val_wasserstein);
    checkpoint.metadata.extra.insert("train".into(), serde_json::to_value(cfg)?);
    let model = LatentFm { vae, unet, spec, preproc, detector: det };
    Ok(LatentTrainResult { model, checkpoint, outcome })
}
