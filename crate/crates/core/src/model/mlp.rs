//! Dense network over flat vectors: a channel regressor, or (with a time
//! embedding) a velocity field over 5-dim channel vectors.

use serde::{Deserialize, Serialize};

use super::layers::{timestep_embedding, Init, Linear};
use crate::numerics::{Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    /// Width of the main input (the state for velocity nets).
    pub input_dim: usize,
    /// Extra conditioning inputs concatenated to the state (0 for none).
    pub cond_dim: usize,
    /// Sinusoidal time features concatenated to the input (0 for none).
    pub time_embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub output_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 9,
            cond_dim: 0,
            time_embed_dim: 0,
            hidden: 64,
            depth: 3,
            output_dim: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    cfg: MlpConfig,
    params: ParamStore,
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn build(cfg: &MlpConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.hidden == 0 || cfg.depth == 0 || cfg.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("MLP sizes must be positive (time_embed_dim even)"));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let mut layers = Vec::new();
        let mut prev = cfg.input_dim + cfg.cond_dim + cfg.time_embed_dim;
        for l in 0..cfg.depth {
            layers.push(Linear::new(&mut init, &format!("l{l}"), prev, cfg.hidden));
            prev = cfg.hidden;
        }
        layers.push(Linear::new(&mut init, "out", prev, cfg.output_dim));
        Ok(Self { cfg: cfg.clone(), params: store, layers })
    }

    pub fn config(&self) -> &MlpConfig {
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

    /// `x: [n, input_dim]`, optional `cond: [n, cond_dim]`, optional times.
    pub fn forward(&self, g: &mut Graph, x: Var, cond: Option<Var>, t: Option<&[f32]>) -> Result<Var> {
        let n = g.shape(x)[0];
        if g.shape(x) != [n, self.cfg.input_dim] {
            return Err(Error::shape("mlp", format!("input {:?}", g.shape(x))));
        }
        let mut h = x;
        match (cond, self.cfg.cond_dim) {
            (Some(c), d) if d > 0 && g.shape(c) == [n, d] => h = g.concat(h, c)?,
            (None, 0) => {}
            _ => return Err(Error::shape("mlp", "condition does not match cond_dim")),
        }
        match (t, self.cfg.time_embed_dim) {
            (Some(t), d) if d > 0 && t.len() == n => {
                let e = g.constant(timestep_embedding(t, d))?;
                h = g.concat(h, e)?;
            }
            (None, 0) => {}
            _ => return Err(Error::shape("mlp", "times do not match time_embed_dim")),
        }
        let p = &self.params;
        let (last, hidden) = self.layers.split_last().expect("depth ≥ 1");
        for l in hidden {
            h = l.forward(g, p, h)?;
            h = g.silu(h)?;
        }
        last.forward(g, p, h)
    }
}
