//! Small convolutional VAE with a power-of-two downsize factor.
//!
//! Inputs are zero-padded (in log space) to a multiple of the downsize
//! factor, so ZP's 30-pixel axis becomes 32 and the latent grid is
//! `ceil(H/f) × ceil(W/f)`; the decoder crops back to the input size.

use serde::{Deserialize, Serialize};

use super::layers::{round_up, Conv, Init, Norm, ResBlock, Upsample};
use super::unet::check_budget;
use crate::data::Detector;
use crate::numerics::{Graph, ParamStore, Var};
use crate::{Error, Result};

pub const DEFAULT_VAE_BUDGET: usize = 60_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VAEConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    pub downsize_factor: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per level; `log2(downsize_factor) + 1` entries.
    pub channel_multipliers: Vec<usize>,
    pub norm_groups: usize,
    pub param_budget: usize,
}

impl Default for VAEConfig {
    fn default() -> Self {
        Self::for_detector(Detector::Zn)
    }
}

impl VAEConfig {
    pub fn for_detector(det: Detector) -> Self {
        let (h, w) = det.dims();
        Self {
            image_height: h,
            image_width: w,
            in_channels: 1,
            downsize_factor: 4,
            latent_channels: 4,
            base_channels: 12,
            channel_multipliers: vec![1, 2, 2],
            norm_groups: 4,
            param_budget: DEFAULT_VAE_BUDGET,
        }
    }

    pub fn levels(&self) -> usize {
        self.downsize_factor.trailing_zeros() as usize
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (
            round_up(self.image_height, self.downsize_factor),
            round_up(self.image_width, self.downsize_factor),
        )
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (
            self.image_height.div_ceil(self.downsize_factor),
            self.image_width.div_ceil(self.downsize_factor),
        )
    }

    /// Per-example latent shape `[channels, h, w]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        let (h, w) = self.latent_dims();
        [self.latent_channels, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsize_factor.is_power_of_two() || self.downsize_factor < 2 {
            return Err(Error::invalid("downsize_factor must be a power of two ≥ 2"));
        }
        if self.channel_multipliers.len() != self.levels() + 1 || self.channel_multipliers.contains(&0) {
            return Err(Error::invalid("VAE needs one channel multiplier per level"));
        }
        if self.image_height == 0 || self.image_width == 0 || self.in_channels == 0 || self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("VAE dimensions must be positive"));
        }
        if self.param_budget == 0 {
            return Err(Error::invalid("param_budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    cfg: VAEConfig,
    params: ParamStore,
    enc_in: Conv,
    enc_blocks: Vec<ResBlock>,
    enc_down: Vec<Conv>,
    enc_norm: Norm,
    enc_out: Conv,
    dec_in: Conv,
    dec_blocks: Vec<ResBlock>,
    dec_up: Vec<Upsample>,
    dec_norm: Norm,
    dec_out: Conv,
}

impl Vae {
    pub fn build(cfg: &VAEConfig, seed: u64) -> Result<Self> {
        let vae = Self::build_unchecked(cfg, seed)?;
        check_budget(vae.count_params(), cfg.param_budget)?;
        Ok(vae)
    }

    pub fn build_unchecked(cfg: &VAEConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_channels).collect();
        let gr = cfg.norm_groups;
        let last = *widths.last().expect("validated");

        let enc_in = Conv::new(&mut init, "enc.in", cfg.in_channels, widths[0], 3, 1);
        let mut enc_blocks = Vec::new();
        let mut enc_down = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            enc_blocks.push(ResBlock::new(&mut init, &format!("enc{l}.res"), prev, w, None, gr));
            if l + 1 < widths.len() {
                enc_down.push(Conv::new(&mut init, &format!("enc{l}.pool"), w, w, 3, 2));
            }
            prev = w;
        }
        let enc_norm = Norm::new(&mut init, "enc.norm", last, gr);
        let enc_out = Conv::new(&mut init, "enc.out", last, 2 * cfg.latent_channels, 3, 1);

        let dec_in = Conv::new(&mut init, "dec.in", cfg.latent_channels, last, 3, 1);
        let mut dec_blocks = Vec::new();
        let mut dec_up = Vec::new();
        let mut prev = last;
        for l in (0..widths.len()).rev() {
            dec_blocks.push(ResBlock::new(&mut init, &format!("dec{l}.res"), prev, widths[l], None, gr));
            if l > 0 {
                dec_up.push(Upsample::new(&mut init, &format!("dec{l}.unpool"), widths[l], widths[l]));
            }
            prev = widths[l];
        }
        let dec_norm = Norm::new(&mut init, "dec.norm", widths[0], gr);
        let dec_out = Conv::new(&mut init, "dec.out", widths[0], cfg.in_channels, 3, 1);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            enc_in,
            enc_blocks,
            enc_down,
            enc_norm,
            enc_out,
            dec_in,
            dec_blocks,
            dec_up,
            dec_norm,
            dec_out,
        })
    }

    pub fn config(&self) -> &VAEConfig {
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

    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        super::replace_params(&mut self.params, store)
    }

    /// `x: [n, c, H, W]` → `(mu, logvar)`, each `[n, latent, ⌈H/f⌉, ⌈W/f⌉]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let p = &self.params;
        let cfg = &self.cfg;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [cfg.in_channels, cfg.image_height, cfg.image_width] {
            return Err(Error::shape(
                "vae_encode",
                format!("input {s:?} for a {}x{} model", cfg.image_height, cfg.image_width),
            ));
        }
        let (ph, pw) = cfg.padded_dims();
        let mut h = if (ph, pw) != (cfg.image_height, cfg.image_width) {
            g.pad2d(x, ph, pw, 0, 0)?
        } else {
            x
        };
        h = self.enc_in.forward(g, p, h)?;
        for (l, block) in self.enc_blocks.iter().enumerate() {
            h = block.forward(g, p, h, None)?;
            if let Some(d) = self.enc_down.get(l) {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.enc_norm.forward(g, p, h)?;
        h = g.silu(h)?;
        h = self.enc_out.forward(g, p, h)?;
        let mu = g.slice_channels(h, 0, cfg.latent_channels)?;
        let logvar = g.slice_channels(h, cfg.latent_channels, cfg.latent_channels)?;
        Ok((mu, logvar))
    }

    /// `z: [n, latent, h, w]` → image `[n, c, H, W]`.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let p = &self.params;
        let cfg = &self.cfg;
        let [lc, lh, lw] = cfg.latent_shape();
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1..] != [lc, lh, lw] {
            return Err(Error::shape("vae_decode", format!("latent {s:?}, expected [n, {lc}, {lh}, {lw}]")));
        }
        let mut h = self.dec_in.forward(g, p, z)?;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            h = block.forward(g, p, h, None)?;
            if let Some(u) = self.dec_up.get(i) {
                h = u.forward(g, p, h)?;
            }
        }
        h = self.dec_norm.forward(g, p, h)?;
        h = g.silu(h)?;
        h = self.dec_out.forward(g, p, h)?;
        let (ph, pw) = cfg.padded_dims();
        if (ph, pw) != (cfg.image_height, cfg.image_width) {
            h = g.crop2d(h, cfg.image_height, cfg.image_width, 0, 0)?;
        }
        Ok(h)
    }
}
