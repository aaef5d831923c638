use std::collections::HashMap;

use super::kernels::{self, AttnDims, Window};
use super::precision::round_slice_to_f16;
use super::{DType, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Silu(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        in_c: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    AddChannel {
        x: Var,
        b: Var,
    },
    Concat(Var, Var),
    Pad2d {
        x: Var,
        top: usize,
        left: usize,
    },
    Crop2d {
        x: Var,
        top: usize,
        left: usize,
    },
    ToTokens(Var),
    FromTokens(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    FeatureEmbed {
        x: Var,
        w: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::AddChannel { .. } => "add_channel",
            Op::Concat(..) => "concat",
            Op::Pad2d { .. } => "pad2d",
            Op::Crop2d { .. } => "crop2d",
            Op::ToTokens(..) => "to_tokens",
            Op::FromTokens(..) => "from_tokens",
            Op::Attention { .. } => "attention",
            Op::FeatureEmbed { .. } => "feature_embed",
            Op::SliceChannels { .. } => "slice_channels",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of one forward pass.
///
/// Ops validate shapes, reject non-finite outputs and, in f16 mode, store
/// every value rounded to half precision. The tape (and all saved
/// activations) is freed when the graph is dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u32, ParamId), Var>,
    precision: DType,
    track_params: bool,
    scope: u32,
    scope_frozen: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<((u32, ParamId), Var)>,
}

impl Gradients {
    /// Gradient of a leaf, if it requires one.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient of a parameter of the default scope.
    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(p, _)| *p == (0, id))
            .and_then(|(_, v)| self.wrt_slice(*v))
    }

    /// Gradients of every default-scope parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params_in(0)
    }

    /// Gradients of the parameters recorded under `scope`.
    pub fn params_in(&self, scope: u32) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params
            .iter()
            .filter(move |((s, _), _)| *s == scope)
            .filter_map(|((_, p), v)| self.grads[v.0].as_deref().map(|g| (*p, g)))
    }

    /// Euclidean norm of a leaf gradient (0 when absent).
    pub fn norm(&self, v: Var) -> f64 {
        self.wrt_slice(v)
            .map(|g| g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], nodes: &[Node], v: Var, g: Vec<f32>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    /// Graph whose parameter leaves require gradients.
    pub fn new() -> Self {
        Self {
            track_params: true,
            ..Self::default()
        }
    }

    /// Graph for inference: parameters are constants, no gradient bookkeeping.
    pub fn inference(precision: DType) -> Self {
        Self {
            precision,
            track_params: false,
            ..Self::default()
        }
    }

    /// Runs `f` with parameters looked up in a separate namespace, so that
    /// several stores (whose ids overlap) can share one graph. A frozen
    /// scope records its parameters as constants.
    pub fn with_scope<R>(&mut self, scope: u32, frozen: bool, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = (self.scope, self.scope_frozen);
        self.scope = scope;
        self.scope_frozen = frozen;
        let r = f(self);
        (self.scope, self.scope_frozen) = saved;
        r
    }

    pub fn with_precision(mut self, precision: DType) -> Self {
        self.precision = precision;
        self
    }

    pub fn precision(&self) -> DType {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, requires_grad: bool) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        let finite = if self.precision == DType::F16 {
            value.set_dtype(DType::F16);
            round_slice_to_f16(value.data_mut())
        } else {
            value.all_finite()
        };
        if !finite {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it requires a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let key = (self.scope, id);
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let t = store.get(id);
        let rg = self.track_params && !self.scope_frozen;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)?;
        self.params.insert(key, v);
        Ok(v)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        let rg = self.grad_of(&[a]);
        self.push(shape, data, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op.name(), x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        let rg = self.grad_of(&[a, b]);
        self.push(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |v| v + s)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f32::exp)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), |v| v / (1.0 + (-v).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(a, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.grad_of(&[a]);
        self.push(vec![1], vec![s as f32], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.nodes[a.0].value.data();
        let s = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        let rg = self.grad_of(&[a]);
        self.push(vec![1], vec![s as f32], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let data = x.data().to_vec();
        let rg = self.grad_of(&[a]);
        self.push(shape.to_vec(), data, Op::Reshape(a), rg)
    }

    /// `x·wᵀ + b` with `x: [m, k]`, `w: [o, k]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (m, k, o) = match (xt.shape(), wt.shape()) {
            (&[m, k], &[o, k2]) if k == k2 => (m, k, o),
            (a, b) => return Err(Error::shape("linear", format!("x {a:?}, w {b:?}"))),
        };
        let mut out = vec![0.0f32; m * o];
        kernels::gemm(m, k, o, xt.data(), false, wt.data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bt = &self.nodes[b.0].value;
            if bt.shape() != [o] {
                return Err(Error::shape("linear", format!("bias {:?} for {o} outputs", bt.shape())));
            }
            for row in out.chunks_mut(o) {
                for (r, bb) in row.iter_mut().zip(bt.data()) {
                    *r += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_of(&deps);
        self.push(vec![m, o], out, Op::Linear { x, w, b }, rg)
    }

    /// 2D cross-correlation, `x: [n, c, h, w]`, `w: [o, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = dims4("conv2d", &self.nodes[x.0].value)?;
        let [o, ci, kh, kw] = dims4("conv2d", &self.nodes[w.0].value)?;
        if ci != c || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c}, kernel {:?}", [o, ci, kh, kw]),
            ));
        }
        let win = Window::conv(c, h, wd, kh, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("{h}x{wd} input too small for kernel {kh} pad {pad}"))
        })?;
        let bias = match b {
            Some(b) => {
                let bt = &self.nodes[b.0].value;
                if bt.shape() != [o] {
                    return Err(Error::shape("conv2d", format!("bias {:?}", bt.shape())));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(self.nodes[x.0].value.data(), n, &win, self.nodes[w.0].value.data(), bias, o);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_of(&deps);
        self.push(vec![n, o, win.out_h, win.out_w], out, Op::Conv2d { x, w, b, win }, rg)
    }

    /// Transposed convolution, `w: [in_c, out_c, k, k]`; output side is
    /// `(in - 1)·stride + k - 2·pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = dims4("conv_transpose2d", &self.nodes[x.0].value)?;
        let [ci, o, kh, kw] = dims4("conv_transpose2d", &self.nodes[w.0].value)?;
        if ci != c || kh != kw {
            return Err(Error::shape("conv_transpose2d", format!("input channels {c}, kernel {:?}", [ci, o, kh, kw])));
        }
        let win = kernels::conv_transpose_window(o, h, wd, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", "invalid geometry"))?;
        let bias = match b {
            Some(b) => {
                let bt = &self.nodes[b.0].value;
                if bt.shape() != [o] {
                    return Err(Error::shape("conv_transpose2d", format!("bias {:?}", bt.shape())));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv_transpose2d_forward(self.nodes[x.0].value.data(), n, c, &win, self.nodes[w.0].value.data(), bias);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_of(&deps);
        self.push(
            vec![n, o, win.height, win.width],
            out,
            Op::ConvTranspose2d { x, w, b, win, in_c: c },
            rg,
        )
    }

    /// Group normalization of `[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let (n, c) = match xt.shape() {
            [n, c, ..] => (*n, *c),
            s => return Err(Error::shape("group_norm", format!("{s:?}"))),
        };
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels in {groups} groups")));
        }
        let plane = xt.numel() / (n * c);
        let (gt, bt) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape("group_norm", "affine parameters must be [c]"));
        }
        let r = kernels::group_norm_forward(xt.data(), n, c, plane, groups, gt.data(), bt.data());
        let shape = xt.shape().to_vec();
        let rg = self.grad_of(&[x, gamma, beta]);
        self.push(
            shape,
            r.y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: r.mean,
                rstd: r.rstd,
            },
            rg,
        )
    }

    /// Adds a per-sample, per-channel vector `b: [n, c]` to `x: [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("add_channel", &self.nodes[x.0].value)?;
        let bt = &self.nodes[b.0].value;
        if bt.shape() != [n, c] {
            return Err(Error::shape("add_channel", format!("{:?} onto {:?}", bt.shape(), [n, c, h, w])));
        }
        let mut out = self.nodes[x.0].value.data().to_vec();
        for (chunk, bb) in out.chunks_mut(h * w).zip(bt.data()) {
            for v in chunk {
                *v += bb;
            }
        }
        let rg = self.grad_of(&[x, b]);
        self.push(vec![n, c, h, w], out, Op::AddChannel { x, b }, rg)
    }

    /// Concatenates along dim 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (at.shape(), bt.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat", format!("{sa:?} with {sb:?}")));
        }
        let n = sa[0];
        let la = at.numel() / n;
        let lb = bt.numel() / n;
        let mut out = Vec::with_capacity(at.numel() + bt.numel());
        for i in 0..n {
            out.extend_from_slice(&at.data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&bt.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let rg = self.grad_of(&[a, b]);
        self.push(shape, out, Op::Concat(a, b), rg)
    }

    /// Zero-pads spatially to `out_h × out_w`, placing the input at
    /// (`top`, `left`).
    pub fn pad2d(&mut self, x: Var, out_h: usize, out_w: usize, top: usize, left: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("pad2d", &self.nodes[x.0].value)?;
        if top + h > out_h || left + w > out_w {
            return Err(Error::shape("pad2d", format!("{h}x{w} at ({top},{left}) in {out_h}x{out_w}")));
        }
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c * out_h * out_w];
        for p in 0..n * c {
            for r in 0..h {
                let d = (p * out_h + top + r) * out_w + left;
                out[d..d + w].copy_from_slice(&src[(p * h + r) * w..(p * h + r + 1) * w]);
            }
        }
        let rg = self.grad_of(&[x]);
        self.push(vec![n, c, out_h, out_w], out, Op::Pad2d { x, top, left }, rg)
    }

    /// Spatial crop to `h × w` starting at (`top`, `left`).
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize, top: usize, left: usize) -> Result<Var> {
        let [n, c, ih, iw] = dims4("crop2d", &self.nodes[x.0].value)?;
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(Error::shape("crop2d", format!("{h}x{w} at ({top},{left}) from {ih}x{iw}")));
        }
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for r in 0..h {
                let s = (p * ih + top + r) * iw + left;
                out.extend_from_slice(&src[s..s + w]);
            }
        }
        let rg = self.grad_of(&[x]);
        self.push(vec![n, c, h, w], out, Op::Crop2d { x, top, left }, rg)
    }

    /// `[n, c, h, w]` → `[n, h·w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("to_tokens", &self.nodes[x.0].value)?;
        let out = transpose_blocks(self.nodes[x.0].value.data(), n, c, h * w);
        let rg = self.grad_of(&[x]);
        self.push(vec![n, h * w, c], out, Op::ToTokens(x), rg)
    }

    /// `[n, h·w, c]` → `[n, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, l, c) = match *self.nodes[x.0].value.shape() {
            [n, l, c] if l == h * w => (n, l, c),
            ref s => return Err(Error::shape("from_tokens", format!("{s:?} to {h}x{w}"))),
        };
        let out = transpose_blocks(self.nodes[x.0].value.data(), n, l, c);
        let rg = self.grad_of(&[x]);
        self.push(vec![n, c, h, w], out, Op::FromTokens(x), rg)
    }

    /// Multi-head scaled dot-product attention. `q: [n, lq, d]`,
    /// `k, v: [n, lk, d]`; each head sees a contiguous `d / heads` slice.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (
            self.nodes[q.0].value.shape(),
            self.nodes[k.0].value.shape(),
            self.nodes[v.0].value.shape(),
        );
        let dims = match (qs, ks, vs) {
            (&[n, lq, d], &[n2, lk, d2], &[n3, lk2, d3])
                if n == n2 && n == n3 && d == d2 && d == d3 && lk == lk2 && heads > 0 && d % heads == 0 =>
            {
                AttnDims {
                    batch: n,
                    q_len: lq,
                    kv_len: lk,
                    dim: d,
                    heads,
                }
            }
            _ => {
                return Err(Error::shape(
                    "attention",
                    format!("q {qs:?}, k {ks:?}, v {vs:?}, heads {heads}"),
                ))
            }
        };
        let (out, probs) = kernels::attention_forward(
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
            dims,
        );
        let rg = self.grad_of(&[q, k, v]);
        self.push(
            vec![dims.batch, dims.q_len, dims.dim],
            out,
            Op::Attention { q, k, v, heads, probs },
            rg,
        )
    }

    /// Turns each feature of `x: [n, f]` into a token:
    /// `out[n, f, :] = x[n, f]·w[f, :] + b[f, :]`.
    pub fn feature_embed(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (n, f, d) = match (xt.shape(), wt.shape()) {
            (&[n, f], &[f2, d]) if f == f2 && bt.shape() == [f, d] => (n, f, d),
            _ => return Err(Error::shape("feature_embed", format!("x {:?}, w {:?}, b {:?}", xt.shape(), wt.shape(), bt.shape()))),
        };
        let mut out = vec![0.0f32; n * f * d];
        for i in 0..n {
            for j in 0..f {
                let xv = xt.data()[i * f + j];
                let o = &mut out[(i * f + j) * d..(i * f + j + 1) * d];
                for ((ov, wv), bv) in o.iter_mut().zip(&wt.data()[j * d..(j + 1) * d]).zip(&bt.data()[j * d..(j + 1) * d]) {
                    *ov = xv * wv + bv;
                }
            }
        }
        let rg = self.grad_of(&[x, w, b]);
        self.push(vec![n, f, d], out, Op::FeatureEmbed { x, w, b }, rg)
    }

    /// Channels `start..start + len` of `[n, c, ...]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let s = xt.shape();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {s:?}", start + len)));
        }
        let (n, c) = (s[0], s[1]);
        let plane = xt.numel() / (n * c);
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let off = (i * c + start) * plane;
            out.extend_from_slice(&xt.data()[off..off + len * plane]);
        }
        let mut shape = s.to_vec();
        shape[1] = len;
        let rg = self.grad_of(&[x]);
        self.push(shape, out, Op::SliceChannels { x, start }, rg)
    }

    /// Reverse-mode gradients of a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0)
    }

    /// As [`Graph::backward`] with the loss gradient seeded to `seed`.
    pub fn backward_seeded(&self, loss: Var, seed: f32) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedGraph);
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.iter().filter(|(_, v)| v.0 <= loss.0).map(|(p, v)| (*p, *v)).collect(),
        })
    }

    fn val(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn backward_node(&self, node: &Node, g: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(b) {
                    accumulate(grads, nodes, b, g.clone());
                }
                accumulate(grads, nodes, a, g);
            }
            Op::Sub(a, b) => {
                if needs(b) {
                    accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
                }
                accumulate(grads, nodes, a, g);
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, nodes, a, g.iter().zip(self.val(b)).map(|(d, y)| d * y).collect());
                }
                if needs(b) {
                    accumulate(grads, nodes, b, g.iter().zip(self.val(a)).map(|(d, x)| d * x).collect());
                }
            }
            Op::Scale(a, s) => accumulate(grads, nodes, a, g.into_iter().map(|d| d * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, nodes, a, g),
            Op::Square(a) => accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(self.val(a)).map(|(d, x)| 2.0 * x * d).collect(),
            ),
            Op::Exp(a) => accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(node.value.data()).map(|(d, y)| d * y).collect(),
            ),
            Op::Silu(a) => accumulate(
                grads,
                nodes,
                a,
                g.iter()
                    .zip(self.val(a))
                    .map(|(d, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        d * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            ),
            Op::Relu(a) => accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(self.val(a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(),
            ),
            Op::LeakyRelu(a, slope) => accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(self.val(a)).map(|(d, &x)| if x > 0.0 { *d } else { slope * d }).collect(),
            ),
            Op::Sum(a) => accumulate(grads, nodes, a, vec![g[0]; nodes[a.0].value.numel()]),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel();
                accumulate(grads, nodes, a, vec![g[0] / n as f32; n]);
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let o = nodes[w.0].value.shape()[0];
                if needs(x) {
                    let mut dx = vec![0.0f32; m * k];
                    kernels::gemm(m, o, k, &g, false, self.val(w), false, 0.0, &mut dx);
                    accumulate(grads, nodes, x, dx);
                }
                if needs(w) {
                    let mut dw = vec![0.0f32; o * k];
                    kernels::gemm(o, m, k, &g, true, self.val(x), false, 0.0, &mut dw);
                    accumulate(grads, nodes, w, dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![0.0f32; o];
                    for row in g.chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, nodes, b, db);
                }
            }
            Op::Conv2d { x, w, b, win } => {
                let n = nodes[x.0].value.shape()[0];
                let o = nodes[w.0].value.shape()[0];
                let r = kernels::conv2d_backward(
                    self.val(x),
                    &g,
                    n,
                    &win,
                    self.val(w),
                    o,
                    needs(x),
                    b.is_some_and(needs),
                );
                self.scatter_conv(grads, x, w, b, r);
            }
            Op::ConvTranspose2d { x, w, b, win, in_c } => {
                let n = nodes[x.0].value.shape()[0];
                let r = kernels::conv_transpose2d_backward(
                    self.val(x),
                    &g,
                    n,
                    in_c,
                    &win,
                    self.val(w),
                    needs(x),
                    b.is_some_and(needs),
                );
                self.scatter_conv(grads, x, w, b, r);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ref mean,
                ref rstd,
            } => {
                let s = nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let plane = nodes[x.0].value.numel() / (n * c);
                let r = kernels::group_norm_backward(self.val(x), &g, n, c, plane, groups, self.val(gamma), mean, rstd);
                accumulate(grads, nodes, x, r.dx);
                accumulate(grads, nodes, gamma, r.dgamma);
                accumulate(grads, nodes, beta, r.dbeta);
            }
            Op::AddChannel { x, b } => {
                if needs(b) {
                    let s = nodes[x.0].value.shape();
                    let plane = s[2] * s[3];
                    let db = g.chunks(plane).map(|c| c.iter().sum()).collect();
                    accumulate(grads, nodes, b, db);
                }
                accumulate(grads, nodes, x, g);
            }
            Op::Concat(a, b) => {
                let n = nodes[a.0].value.shape()[0];
                let la = nodes[a.0].value.numel() / n;
                let lb = nodes[b.0].value.numel() / n;
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for chunk in g.chunks(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                accumulate(grads, nodes, a, ga);
                accumulate(grads, nodes, b, gb);
            }
            Op::Pad2d { x, top, left } => {
                let s = nodes[x.0].value.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let mut dx = Vec::with_capacity(n * c * h * w);
                for p in 0..n * c {
                    for r in 0..h {
                        let s = (p * oh + top + r) * ow + left;
                        dx.extend_from_slice(&g[s..s + w]);
                    }
                }
                accumulate(grads, nodes, x, dx);
            }
            Op::Crop2d { x, top, left } => {
                let s = nodes[x.0].value.shape();
                let (n, c, ih, iw) = (s[0], s[1], s[2], s[3]);
                let os = node.value.shape();
                let (h, w) = (os[2], os[3]);
                let mut dx = vec![0.0f32; n * c * ih * iw];
                for p in 0..n * c {
                    for r in 0..h {
                        let d = (p * ih + top + r) * iw + left;
                        dx[d..d + w].copy_from_slice(&g[(p * h + r) * w..(p * h + r + 1) * w]);
                    }
                }
                accumulate(grads, nodes, x, dx);
            }
            Op::ToTokens(x) => {
                let s = nodes[x.0].value.shape();
                accumulate(grads, nodes, x, transpose_blocks(&g, s[0], s[2] * s[3], s[1]));
            }
            Op::FromTokens(x) => {
                let s = nodes[x.0].value.shape();
                accumulate(grads, nodes, x, transpose_blocks(&g, s[0], s[2], s[1]));
            }
            Op::Attention { q, k, v, heads, ref probs } => {
                let (qs, ks) = (nodes[q.0].value.shape(), nodes[k.0].value.shape());
                let dims = AttnDims {
                    batch: qs[0],
                    q_len: qs[1],
                    kv_len: ks[1],
                    dim: qs[2],
                    heads,
                };
                let r = kernels::attention_backward(self.val(q), self.val(k), self.val(v), probs, &g, dims);
                accumulate(grads, nodes, q, r.dq);
                accumulate(grads, nodes, k, r.dk);
                accumulate(grads, nodes, v, r.dv);
            }
            Op::FeatureEmbed { x, w, b } => {
                let s = node.value.shape();
                let (n, f, d) = (s[0], s[1], s[2]);
                let (xv, wv) = (self.val(x), self.val(w));
                if needs(x) {
                    let mut dx = vec![0.0f32; n * f];
                    for (i, dxi) in dx.iter_mut().enumerate() {
                        let j = i % f;
                        *dxi = g[i * d..(i + 1) * d].iter().zip(&wv[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                    }
                    accumulate(grads, nodes, x, dx);
                }
                let mut dw = vec![0.0f32; f * d];
                let mut db = vec![0.0f32; f * d];
                for i in 0..n {
                    for j in 0..f {
                        let xs = xv[i * f + j];
                        let gi = &g[(i * f + j) * d..(i * f + j + 1) * d];
                        for c in 0..d {
                            dw[j * d + c] += gi[c] * xs;
                            db[j * d + c] += gi[c];
                        }
                    }
                }
                accumulate(grads, nodes, w, dw);
                accumulate(grads, nodes, b, db);
            }
            Op::SliceChannels { x, start } => {
                let s = nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let plane = nodes[x.0].value.numel() / (n * c);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0f32; nodes[x.0].value.numel()];
                for i in 0..n {
                    let off = (i * c + start) * plane;
                    dx[off..off + len * plane].copy_from_slice(&g[i * len * plane..(i + 1) * len * plane]);
                }
                accumulate(grads, nodes, x, dx);
            }
        }
    }

    fn scatter_conv(&self, grads: &mut [Option<Vec<f32>>], x: Var, w: Var, b: Option<Var>, r: kernels::ConvGrads) {
        if let Some(dx) = r.dx {
            accumulate(grads, &self.nodes, x, dx);
        }
        accumulate(grads, &self.nodes, w, r.dw);
        if let (Some(b), Some(db)) = (b, r.db) {
            accumulate(grads, &self.nodes, b, db);
        }
    }
}

/// Per-batch transpose of `rows × cols` blocks.
fn transpose_blocks(src: &[f32], batch: usize, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for n in 0..batch {
        let s = &src[n * rows * cols..(n + 1) * rows * cols];
        let d = &mut out[n * rows * cols..(n + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}
