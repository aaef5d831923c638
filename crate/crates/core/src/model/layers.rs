//! Parameterized building blocks shared by the U-Net, the VAE and the dense
//! networks. A block owns only `ParamId`s; the values live in a `ParamStore`
//! so that one store can be checkpointed, updated by Adam and read from
//! several inference graphs at once.

use rand::Rng as _;

use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{seeded, Rng};
use crate::Result;

/// Initializer writing fresh parameters into a store.
///
/// Weights are drawn from `U(-a, a)` with `a = √(3 / fan_in)` (unit-variance
/// preserving for linear maps); biases and norm shifts start at 0, norm
/// scales at 1.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: seeded(seed) }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let a = (3.0 / fan_in.max(1) as f32).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| self.rng.gen_range(-a..a));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        Self {
            w: init.uniform(&format!("{name}.w"), &[out, inp], inp),
            b: init.zeros(&format!("{name}.b"), &[out]),
        }
    }

    pub fn zeroed(init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        Self {
            w: init.zeros(&format!("{name}.w"), &[out, inp]),
            b: init.zeros(&format!("{name}.b"), &[out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w)?;
        let b = g.param(p, self.b)?;
        g.linear(x, w, Some(b))
    }

    /// Applies the layer to the last axis of `x: [n, l, d]`.
    pub fn forward_tokens(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (n, l, d) = match *g.shape(x) {
            [n, l, d] => (n, l, d),
            ref s => return Err(crate::Error::shape("linear", format!("token tensor {s:?}"))),
        };
        let flat = g.reshape(x, &[n * l, d])?;
        let y = self.forward(g, p, flat)?;
        let o = g.shape(y)[1];
        g.reshape(y, &[n, l, o])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            w: init.uniform(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k),
            b: init.zeros(&format!("{name}.b"), &[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn zeroed(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            w: init.zeros(&format!("{name}.w"), &[cout, cin, k, k]),
            b: init.zeros(&format!("{name}.b"), &[cout]),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w)?;
        let b = g.param(p, self.b)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Kernel-2, stride-2 transposed convolution doubling both spatial axes.
#[derive(Clone, Copy, Debug)]
pub struct Upsample {
    pub w: ParamId,
    pub b: ParamId,
}

impl Upsample {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: init.uniform(&format!("{name}.w"), &[cin, cout, 2, 2], cin),
            b: init.zeros(&format!("{name}.b"), &[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w)?;
        let b = g.param(p, self.b)?;
        g.conv_transpose2d(x, w, Some(b), 2, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    /// `groups` is reduced to the largest divisor of `channels` not above it.
    pub fn new(init: &mut Init, name: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.max(1)).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[channels]),
            beta: init.zeros(&format!("{name}.beta"), &[channels]),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(p, self.gamma)?;
        let beta = g.param(p, self.beta)?;
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Pre-activation residual block: `x + conv(σ(gn(conv(σ(gn(x))) + e)))` with
/// an optional per-channel embedding shift `e` and a 1×1 skip projection
/// when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    n1: Norm,
    c1: Conv,
    emb: Option<Linear>,
    n2: Norm,
    c2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, emb_dim: Option<usize>, groups: usize) -> Self {
        Self {
            n1: Norm::new(init, &format!("{name}.n1"), cin, groups),
            c1: Conv::new(init, &format!("{name}.c1"), cin, cout, 3, 1),
            emb: emb_dim.map(|d| Linear::new(init, &format!("{name}.emb"), d, cout)),
            n2: Norm::new(init, &format!("{name}.n2"), cout, groups),
            c2: Conv::new(init, &format!("{name}.c2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(init, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    /// `emb` is the already-activated embedding `[n, emb_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, emb: Option<Var>) -> Result<Var> {
        let h = self.n1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let mut h = self.c1.forward(g, p, h)?;
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let shift = proj.forward(g, p, e)?;
            h = g.add_channel(h, shift)?;
        }
        let h = self.n2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.c2.forward(g, p, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

/// Cross-attention from image positions (queries) to conditioning tokens
/// (keys/values), added residually.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, token_dim: usize, heads: usize, groups: usize) -> Self {
        Self {
            norm: Norm::new(init, &format!("{name}.norm"), channels, groups),
            q: Linear::new(init, &format!("{name}.q"), channels, channels),
            k: Linear::new(init, &format!("{name}.k"), token_dim, channels),
            v: Linear::new(init, &format!("{name}.v"), token_dim, channels),
            out: Linear::new(init, &format!("{name}.out"), channels, channels),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, tokens: Var) -> Result<Var> {
        let [_, _, h, w] = <[usize; 4]>::try_from(g.shape(x)).map_err(|_| crate::Error::shape("cross_attention", "expected NCHW"))?;
        let hn = self.norm.forward(g, p, x)?;
        let t = g.to_tokens(hn)?;
        let q = self.q.forward_tokens(g, p, t)?;
        let k = self.k.forward_tokens(g, p, tokens)?;
        let v = self.v.forward_tokens(g, p, tokens)?;
        let a = g.attention(q, k, v, self.heads)?;
        let o = self.out.forward_tokens(g, p, a)?;
        let o = g.from_tokens(o, h, w)?;
        g.add(x, o)
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000) with `dim / 2`
/// geometric frequencies; `[sin | cos]` halves.
pub fn timestep_embedding(t: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp())
        .collect();
    let mut out = vec![0.0f32; t.len() * dim];
    for (row, &tv) in out.chunks_mut(dim).zip(t) {
        let pos = tv as f64 * 1000.0;
        for (i, f) in freqs.iter().enumerate() {
            row[i] = (pos * f).sin() as f32;
            row[half + i] = (pos * f).cos() as f32;
        }
    }
    Tensor::new(vec![t.len(), dim], out).expect("embedding shape")
}

/// Smallest multiple of `m` that is ≥ `x`.
pub fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}
