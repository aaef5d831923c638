//! Conditional U-Net velocity network.
//!
//! Time enters through a sinusoidal embedding and a 2-layer MLP whose output
//! shifts every residual block. The nine particle features become nine
//! tokens (one per feature) that image positions cross-attend to at the
//! configured levels; a pooled projection of the features is also added to
//! the time embedding so that every block sees the condition.

use serde::{Deserialize, Serialize};

use super::layers::{round_up, timestep_embedding, Conv, CrossAttention, Init, Linear, Norm, ResBlock, Upsample};
use crate::data::{Detector, NUM_FEATURES};
use crate::numerics::{Graph, ParamStore, Var};
use crate::{Error, Result};

pub const DEFAULT_UNET_BUDGET: usize = 77_000;

/// Accepted parameter counts relative to the configured budget.
pub const BUDGET_BAND: (f64, f64) = (0.65, 1.3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// 1 for pixel space, the VAE latent width in latent space.
    pub in_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level, finest first.
    pub channel_multipliers: Vec<usize>,
    pub num_down_levels: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    /// Width of the hidden time/condition embedding fed to residual blocks.
    pub embed_hidden: usize,
    /// Width of the per-feature conditioning tokens.
    pub cond_token_dim: usize,
    pub attention_levels: Vec<usize>,
    pub attention_heads: usize,
    pub norm_groups: usize,
    /// Add a projection of the features to the time embedding as well.
    pub cond_in_embedding: bool,
    pub param_budget: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::for_detector(Detector::Zn)
    }
}

impl UNetConfig {
    /// Default widths for a pixel-space model on `det`.
    pub fn for_detector(det: Detector) -> Self {
        let (h, w) = det.dims();
        Self {
            image_height: h,
            image_width: w,
            in_channels: 1,
            base_channels: 10,
            channel_multipliers: vec![1, 2, 2],
            num_down_levels: 2,
            cond_dim: NUM_FEATURES,
            time_embed_dim: 32,
            embed_hidden: 64,
            cond_token_dim: 16,
            attention_levels: vec![1, 2],
            attention_heads: 2,
            norm_groups: 4,
            cond_in_embedding: true,
            param_budget: DEFAULT_UNET_BUDGET,
        }
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        let m = 1 << self.num_down_levels;
        (round_up(self.image_height, m), round_up(self.image_width, m))
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("U-Net dimensions must be positive"));
        }
        if self.channel_multipliers.len() != self.num_down_levels + 1 || self.channel_multipliers.contains(&0) {
            return Err(Error::invalid(format!(
                "{} channel multipliers for {} down levels; need one per level",
                self.channel_multipliers.len(),
                self.num_down_levels
            )));
        }
        let (ph, pw) = self.padded_dims();
        let m = 1 << self.num_down_levels;
        if ph % m != 0 || pw % m != 0 {
            return Err(Error::invalid("padded dims not divisible by 2^levels"));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l > self.num_down_levels) {
            return Err(Error::invalid(format!("attention level {l} does not exist")));
        }
        if self.attention_heads == 0 || self.widths().iter().enumerate().any(|(l, w)| self.attention_levels.contains(&l) && w % self.attention_heads != 0) {
            return Err(Error::invalid("attention width not divisible by heads"));
        }
        if self.cond_dim == 0 || self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 || self.embed_hidden == 0 || self.cond_token_dim == 0 {
            return Err(Error::invalid("embedding sizes must be positive (time_embed_dim even)"));
        }
        if self.param_budget == 0 {
            return Err(Error::invalid("param_budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<CrossAttention>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    cond_emb: Option<(Linear, Linear)>,
    token_w: crate::numerics::ParamId,
    token_b: crate::numerics::ParamId,
    conv_in: Conv,
    down: Vec<Level>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Upsample>,
    out_norm: Norm,
    conv_out: Conv,
}

pub(crate) fn check_budget(count: usize, budget: usize) -> Result<()> {
    let lo = (BUDGET_BAND.0 * budget as f64).ceil() as usize;
    let hi = (BUDGET_BAND.1 * budget as f64).floor() as usize;
    if count < lo || count > hi {
        return Err(Error::ParamBudget { count, lo, hi, budget });
    }
    Ok(())
}

impl UNet {
    /// Builds and initializes the network; rejects configs whose parameter
    /// count leaves the budget band.
    pub fn build(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        let net = Self::build_unchecked(cfg, seed)?;
        check_budget(net.count_params(), cfg.param_budget)?;
        Ok(net)
    }

    /// Builds without the budget check (used to size configurations).
    pub fn build_unchecked(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let widths = cfg.widths();
        let (td, ed, gr) = (cfg.time_embed_dim, cfg.embed_hidden, cfg.norm_groups);
        let time1 = Linear::new(&mut init, "time.l1", td, ed);
        let time2 = Linear::new(&mut init, "time.l2", ed, ed);
        let cond_emb = cfg.cond_in_embedding.then(|| {
            (
                Linear::new(&mut init, "cond.l1", cfg.cond_dim, ed),
                Linear::new(&mut init, "cond.l2", ed, ed),
            )
        });
        let token_w = init.uniform("tokens.w", &[cfg.cond_dim, cfg.cond_token_dim], 1);
        let token_b = init.uniform("tokens.b", &[cfg.cond_dim, cfg.cond_token_dim], 1);
        let conv_in = Conv::new(&mut init, "in", cfg.in_channels, widths[0], 3, 1);
        let attn = |init: &mut Init, name: &str, l: usize| {
            cfg.attention_levels
                .contains(&l)
                .then(|| CrossAttention::new(init, name, widths[l], cfg.cond_token_dim, cfg.attention_heads, gr))
        };
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            down.push(Level {
                res: ResBlock::new(&mut init, &format!("down{l}.res"), prev, w, Some(ed), gr),
                attn: attn(&mut init, &format!("down{l}.attn"), l),
            });
            if l + 1 < widths.len() {
                downsample.push(Conv::new(&mut init, &format!("down{l}.pool"), w, w, 3, 2));
            }
            prev = w;
        }
        let mid = ResBlock::new(&mut init, "mid", prev, prev, Some(ed), gr);
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for l in (0..widths.len()).rev() {
            up.push(Level {
                res: ResBlock::new(&mut init, &format!("up{l}.res"), 2 * widths[l], widths[l], Some(ed), gr),
                attn: attn(&mut init, &format!("up{l}.attn"), l),
            });
            if l > 0 {
                upsample.push(Upsample::new(&mut init, &format!("up{l}.unpool"), widths[l], widths[l - 1]));
            }
        }
        let out_norm = Norm::new(&mut init, "out.norm", widths[0], gr);
        let conv_out = Conv::zeroed(&mut init, "out.conv", widths[0], cfg.in_channels, 3);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            time1,
            time2,
            cond_emb,
            token_w,
            token_b,
            conv_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Replaces all parameter values, checking names and shapes.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        super::replace_params(&mut self.params, store)
    }

    /// Velocity for `x: [n, in_channels, H, W]` at times `t` (one per row)
    /// and standardized conditions `cond: [n, cond_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, t: &[f32], cond: Var) -> Result<Var> {
        let p = &self.params;
        let cfg = &self.cfg;
        let shape = g.shape(x).to_vec();
        let n = shape[0];
        if shape != [n, cfg.in_channels, cfg.image_height, cfg.image_width] || t.len() != n {
            return Err(Error::shape(
                "unet",
                format!("input {shape:?} with {} times for a {}x{} model", t.len(), cfg.image_height, cfg.image_width),
            ));
        }
        if g.shape(cond) != [n, cfg.cond_dim] {
            return Err(Error::shape("unet", format!("condition {:?}", g.shape(cond))));
        }
        let temb = g.constant(timestep_embedding(t, cfg.time_embed_dim))?;
        let e = self.time1.forward(g, p, temb)?;
        let e = g.silu(e)?;
        let mut e = self.time2.forward(g, p, e)?;
        if let Some((l1, l2)) = &self.cond_emb {
            let c = l1.forward(g, p, cond)?;
            let c = g.silu(c)?;
            let c = l2.forward(g, p, c)?;
            e = g.add(e, c)?;
        }
        let emb = g.silu(e)?;
        let tw = g.param(p, self.token_w)?;
        let tb = g.param(p, self.token_b)?;
        let tokens = g.feature_embed(cond, tw, tb)?;
        let tokens = g.silu(tokens)?;

        let (ph, pw) = cfg.padded_dims();
        let mut h = if (ph, pw) != (cfg.image_height, cfg.image_width) {
            g.pad2d(x, ph, pw, 0, 0)?
        } else {
            x
        };
        h = self.conv_in.forward(g, p, h)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, level) in self.down.iter().enumerate() {
            h = level.res.forward(g, p, h, Some(emb))?;
            if let Some(a) = &level.attn {
                h = a.forward(g, p, h, tokens)?;
            }
            skips.push(h);
            if let Some(d) = self.downsample.get(l) {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.mid.forward(g, p, h, Some(emb))?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(h, skip)?;
            h = level.res.forward(g, p, h, Some(emb))?;
            if let Some(a) = &level.attn {
                h = a.forward(g, p, h, tokens)?;
            }
            if let Some(u) = self.upsample.get(i) {
                h = u.forward(g, p, h)?;
            }
        }
        h = self.out_norm.forward(g, p, h)?;
        h = g.silu(h)?;
        h = self.conv_out.forward(g, p, h)?;
        if (ph, pw) != (cfg.image_height, cfg.image_width) {
            h = g.crop2d(h, cfg.image_height, cfg.image_width, 0, 0)?;
        }
        Ok(h)
    }
}
