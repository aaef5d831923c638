//! Raw slice kernels behind the graph ops.
//!
//! Everything here works on flat NCHW buffers with explicit dimensions. Batch
//! loops go through [`crate::par`]; weight-gradient reductions use fixed
//! sample groups so results do not depend on the thread count.

use crate::par;

/// Samples per partial sum in weight-gradient reductions.
const SAMPLE_GROUP: usize = 8;

/// `c = a·b + beta·c` for row-major matrices. `a` is `m×k` (or `k×m` when
/// `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel sliding window over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col(x: &[f32], g: &Window, cols: &mut [f32]) {
    im2col_into(x, g, cols, g.col_cols());
}

/// `im2col` writing row `r` at `cols[r * ld..]`, so several samples can share
/// one column matrix.
fn im2col_into(x: &[f32], g: &Window, cols: &mut [f32], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let plane_len = g.height * g.width;
    for c in 0..g.channels {
        let plane = &x[c * plane_len..(c + 1) * plane_len];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + g.col_cols()];
                // output columns whose input column lies inside the image
                let lo = p.saturating_sub(kj).div_ceil(s).min(g.out_w);
                let hi = (g.width + p).saturating_sub(kj).div_ceil(s).clamp(lo, g.out_w);
                for oh in 0..g.out_h {
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    let ih = oh * s + ki;
                    if ih < p || ih - p >= g.height {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[(ih - p) * g.width..(ih - p + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if hi == lo {
                        continue;
                    }
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[lo + kj - p..hi + kj - p]);
                    } else {
                        for (ow, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ow) * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// For every (kernel tap, output position), the source offset within an input
/// plane, or `None` where the window reads padding.
fn tap_table(g: &Window) -> Vec<Option<usize>> {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let mut t = Vec::with_capacity(k * k * g.col_cols());
    for ki in 0..k {
        for kj in 0..k {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let (ih, iw) = (oh * s + ki, ow * s + kj);
                    let inside = ih >= p && iw >= p && ih - p < g.height && iw - p < g.width;
                    t.push(inside.then(|| (ih - p) * g.width + iw - p));
                }
            }
        }
    }
    t
}

/// `im2col_into` through a precomputed [`tap_table`]; cheaper on tiny planes
/// where per-row bookkeeping dominates.
fn gather_cols(x: &[f32], g: &Window, taps: &[Option<usize>], cols: &mut [f32], ld: usize) {
    let plane = g.col_cols();
    let kk = g.kernel * g.kernel;
    let plane_len = g.height * g.width;
    for c in 0..g.channels {
        let src = &x[c * plane_len..(c + 1) * plane_len];
        for (t, row_taps) in taps.chunks(plane).enumerate() {
            let row = c * kk + t;
            for (d, tap) in cols[row * ld..row * ld + plane].iter_mut().zip(row_taps) {
                *d = tap.map_or(0.0, |i| src[i]);
            }
        }
    }
}

/// Scatter-adds columns back into an image (adjoint of [`im2col`]).
pub fn col2im(cols: &[f32], g: &Window, x: &mut [f32]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in src[oh * g.out_w..(oh + 1) * g.out_w].iter().enumerate() {
                        let iw = (ow * s + kj) as isize - p;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad(dy: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut db = vec![0.0f32; channels];
    for n in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let off = (n * channels + c) * plane;
            *d += dy[off..off + plane].iter().sum::<f32>();
        }
    }
    db
}

/// Output planes narrower than this are batched across samples in one gemm.
const MIN_GEMM_COLS: usize = 64;

/// Cross-correlation. `weight` is `[out_c, g.channels, k, k]`.
pub fn conv2d_forward(x: &[f32], batch: usize, g: &Window, weight: &[f32], bias: Option<&[f32]>, out_c: usize) -> Vec<f32> {
    let plane = g.col_cols();
    let mut out = vec![0.0f32; batch * out_c * plane];
    if plane >= MIN_GEMM_COLS {
        par::for_each_chunk(&mut out, out_c * plane, |n, y| {
            let xn = &x[n * g.image_len()..(n + 1) * g.image_len()];
            if g.is_pointwise() {
                gemm(out_c, g.channels, plane, weight, false, xn, false, 0.0, y);
            } else {
                let mut cols = vec![0.0f32; g.col_rows() * plane];
                im2col(xn, g, &mut cols);
                gemm(out_c, g.col_rows(), plane, weight, false, &cols, false, 0.0, y);
            }
            if let Some(b) = bias {
                add_bias(y, b, plane);
            }
        });
        return out;
    }
    // Small planes: one gemm per group of samples side by side, so packing
    // overhead is paid per group rather than per sample.
    let per = MIN_GEMM_COLS.div_ceil(plane);
    let taps = tap_table(g);
    par::for_each_chunk(&mut out, per * out_c * plane, |grp, y| {
        let n0 = grp * per;
        let m = y.len() / (out_c * plane);
        let ld = m * plane;
        let mut cols = vec![0.0f32; g.col_rows() * ld];
        for j in 0..m {
            let xn = &x[(n0 + j) * g.image_len()..(n0 + j + 1) * g.image_len()];
            gather_cols(xn, g, &taps, &mut cols[j * plane..], ld);
        }
        let mut wide = vec![0.0f32; out_c * ld];
        gemm(out_c, g.col_rows(), ld, weight, false, &cols, false, 0.0, &mut wide);
        for j in 0..m {
            for oc in 0..out_c {
                let dst = &mut y[(j * out_c + oc) * plane..(j * out_c + oc + 1) * plane];
                dst.copy_from_slice(&wide[oc * ld + j * plane..oc * ld + (j + 1) * plane]);
            }
            if let Some(b) = bias {
                add_bias(&mut y[j * out_c * plane..(j + 1) * out_c * plane], b, plane);
            }
        }
    });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    g: &Window,
    weight: &[f32],
    out_c: usize,
    need_dx: bool,
    need_db: bool,
) -> ConvGrads {
    let plane = g.col_cols();
    let rows = g.col_rows();
    let groups = batch.div_ceil(SAMPLE_GROUP);
    let dw = par::reduce_sum(groups, out_c * rows, |grp| {
        let mut acc = vec![0.0f32; out_c * rows];
        let mut cols = vec![0.0f32; rows * plane];
        for n in grp * SAMPLE_GROUP..((grp + 1) * SAMPLE_GROUP).min(batch) {
            let xn = &x[n * g.image_len()..(n + 1) * g.image_len()];
            let dyn_ = &dy[n * out_c * plane..(n + 1) * out_c * plane];
            let c: &[f32] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(out_c, plane, rows, dyn_, false, c, true, 1.0, &mut acc);
        }
        acc
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; batch * g.image_len()];
        par::for_each_chunk(&mut dx, g.image_len(), |n, dxn| {
            let dyn_ = &dy[n * out_c * plane..(n + 1) * out_c * plane];
            if g.is_pointwise() {
                gemm(rows, out_c, plane, weight, true, dyn_, false, 0.0, dxn);
            } else {
                let mut dcols = vec![0.0f32; rows * plane];
                gemm(rows, out_c, plane, weight, true, dyn_, false, 0.0, &mut dcols);
                col2im(&dcols, g, dxn);
            }
        });
        dx
    });
    let db = need_db.then(|| bias_grad(dy, batch, out_c, plane));
    ConvGrads { dx, dw, db }
}

/// Output geometry of a transposed convolution expressed as the window that
/// slides over its *output* image.
pub fn conv_transpose_window(out_c: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Window> {
    let oh = ((in_h - 1) * stride + kernel).checked_sub(2 * pad)?;
    let ow = ((in_w - 1) * stride + kernel).checked_sub(2 * pad)?;
    let g = Window::conv(out_c, oh, ow, kernel, stride, pad)?;
    (g.out_h == in_h && g.out_w == in_w).then_some(g)
}

/// Transposed convolution. `weight` is `[in_c, out_c, k, k]`; `g` is from
/// [`conv_transpose_window`].
pub fn conv_transpose2d_forward(x: &[f32], batch: usize, in_c: usize, g: &Window, weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let grid = g.col_cols();
    let rows = g.col_rows();
    let mut out = vec![0.0f32; batch * g.image_len()];
    par::for_each_chunk(&mut out, g.image_len(), |n, y| {
        let xn = &x[n * in_c * grid..(n + 1) * in_c * grid];
        let mut cols = vec![0.0f32; rows * grid];
        gemm(rows, in_c, grid, weight, true, xn, false, 0.0, &mut cols);
        col2im(&cols, g, y);
        if let Some(b) = bias {
            add_bias(y, b, g.height * g.width);
        }
    });
    out
}

pub fn conv_transpose2d_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    in_c: usize,
    g: &Window,
    weight: &[f32],
    need_dx: bool,
    need_db: bool,
) -> ConvGrads {
    let grid = g.col_cols();
    let rows = g.col_rows();
    let groups = batch.div_ceil(SAMPLE_GROUP);
    let dw = par::reduce_sum(groups, in_c * rows, |grp| {
        let mut acc = vec![0.0f32; in_c * rows];
        let mut dcols = vec![0.0f32; rows * grid];
        for n in grp * SAMPLE_GROUP..((grp + 1) * SAMPLE_GROUP).min(batch) {
            let xn = &x[n * in_c * grid..(n + 1) * in_c * grid];
            im2col(&dy[n * g.image_len()..(n + 1) * g.image_len()], g, &mut dcols);
            gemm(in_c, grid, rows, xn, false, &dcols, true, 1.0, &mut acc);
        }
        acc
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; batch * in_c * grid];
        par::for_each_chunk(&mut dx, in_c * grid, |n, dxn| {
            let mut dcols = vec![0.0f32; rows * grid];
            im2col(&dy[n * g.image_len()..(n + 1) * g.image_len()], g, &mut dcols);
            gemm(in_c, rows, grid, weight, false, &dcols, false, 0.0, dxn);
        });
        dx
    });
    let db = need_db.then(|| bias_grad(dy, batch, g.channels, g.height * g.width));
    ConvGrads { dx, dw, db }
}

pub const NORM_EPS: f32 = 1e-5;

pub struct GroupNormOut {
    pub y: Vec<f32>,
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Group normalization over `[batch, channels, plane]`.
pub fn group_norm_forward(x: &[f32], batch: usize, channels: usize, plane: usize, groups: usize, gamma: &[f32], beta: &[f32]) -> GroupNormOut {
    let cpg = channels / groups;
    let glen = cpg * plane;
    let mut y = vec![0.0f32; x.len()];
    let mut stats = vec![0.0f32; batch * groups * 2];
    par::for_each_chunk2(&mut y, glen, &mut stats, 2, |idx, yg, st| {
        let xg = &x[idx * glen..(idx + 1) * glen];
        let mean = xg.iter().map(|&v| v as f64).sum::<f64>() / glen as f64;
        let var = xg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / glen as f64;
        let rstd = 1.0 / (var + NORM_EPS as f64).sqrt();
        let (mean, rstd) = (mean as f32, rstd as f32);
        let c0 = (idx % groups) * cpg;
        for ci in 0..cpg {
            let (ga, be) = (gamma[c0 + ci], beta[c0 + ci]);
            for p in 0..plane {
                let j = ci * plane + p;
                yg[j] = (xg[j] - mean) * rstd * ga + be;
            }
        }
        st[0] = mean;
        st[1] = rstd;
    });
    let mean = stats.iter().step_by(2).copied().collect();
    let rstd = stats.iter().skip(1).step_by(2).copied().collect();
    GroupNormOut { y, mean, rstd }
}

pub struct GroupNormGrads {
    pub dx: Vec<f32>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    gamma: &[f32],
    mean: &[f32],
    rstd: &[f32],
) -> GroupNormGrads {
    let cpg = channels / groups;
    let glen = cpg * plane;
    let mut dx = vec![0.0f32; x.len()];
    par::for_each_chunk(&mut dx, glen, |idx, dxg| {
        let xg = &x[idx * glen..(idx + 1) * glen];
        let dyg = &dy[idx * glen..(idx + 1) * glen];
        let (mu, rs) = (mean[idx], rstd[idx]);
        let c0 = (idx % groups) * cpg;
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for ci in 0..cpg {
            let ga = gamma[c0 + ci];
            for p in 0..plane {
                let j = ci * plane + p;
                let d = (dyg[j] * ga) as f64;
                sum_d += d;
                sum_dx += d * ((xg[j] - mu) * rs) as f64;
            }
        }
        let md = (sum_d / glen as f64) as f32;
        let mdx = (sum_dx / glen as f64) as f32;
        for ci in 0..cpg {
            let ga = gamma[c0 + ci];
            for p in 0..plane {
                let j = ci * plane + p;
                let xh = (xg[j] - mu) * rs;
                dxg[j] = rs * (dyg[j] * ga - md - xh * mdx);
            }
        }
    });
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for n in 0..batch {
        for c in 0..channels {
            let idx = n * groups + c / cpg;
            let off = (n * channels + c) * plane;
            let (mu, rs) = (mean[idx], rstd[idx]);
            let mut dg = 0.0f32;
            let mut db = 0.0f32;
            for p in 0..plane {
                dg += dy[off + p] * (x[off + p] - mu) * rs;
                db += dy[off + p];
            }
            dgamma[c] += dg;
            dbeta[c] += db;
        }
    }
    GroupNormGrads { dx, dgamma, dbeta }
}

/// Dimensions of a batched multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Returns the concatenated head outputs `[batch, q_len, dim]` and the
/// softmax weights `[batch, heads, q_len, kv_len]`.
pub fn attention_forward(q: &[f32], k: &[f32], v: &[f32], a: AttnDims) -> (Vec<f32>, Vec<f32>) {
    let dh = a.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; a.batch * a.q_len * a.dim];
    let mut probs = vec![0.0f32; a.batch * a.heads * a.q_len * a.kv_len];
    par::for_each_chunk2(
        &mut out,
        a.q_len * a.dim,
        &mut probs,
        a.heads * a.q_len * a.kv_len,
        |n, on, pn| {
            let qn = &q[n * a.q_len * a.dim..];
            let kn = &k[n * a.kv_len * a.dim..];
            let vn = &v[n * a.kv_len * a.dim..];
            for h in 0..a.heads {
                let off = h * dh;
                for i in 0..a.q_len {
                    let row = &mut pn[(h * a.q_len + i) * a.kv_len..(h * a.q_len + i + 1) * a.kv_len];
                    let qi = &qn[i * a.dim + off..i * a.dim + off + dh];
                    let mut max = f32::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kn[j * a.dim + off..j * a.dim + off + dh];
                        *r = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f32>() * scale;
                        max = max.max(*r);
                    }
                    let mut z = 0.0f32;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    let oi = &mut on[i * a.dim + off..i * a.dim + off + dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vn[j * a.dim + off..j * a.dim + off + dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        },
    );
    (out, probs)
}

pub struct AttnGrads {
    pub dq: Vec<f32>,
    pub dk: Vec<f32>,
    pub dv: Vec<f32>,
}

pub fn attention_backward(q: &[f32], k: &[f32], v: &[f32], probs: &[f32], dout: &[f32], a: AttnDims) -> AttnGrads {
    let dh = a.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let qlen = a.q_len * a.dim;
    let kvlen = a.kv_len * a.dim;
    let per_sample = par::map(a.batch, |n| {
        let qn = &q[n * qlen..(n + 1) * qlen];
        let kn = &k[n * kvlen..(n + 1) * kvlen];
        let vn = &v[n * kvlen..(n + 1) * kvlen];
        let don = &dout[n * qlen..(n + 1) * qlen];
        let pn = &probs[n * a.heads * a.q_len * a.kv_len..];
        let mut dq = vec![0.0f32; qlen];
        let mut dk = vec![0.0f32; kvlen];
        let mut dv = vec![0.0f32; kvlen];
        let mut dp = vec![0.0f32; a.kv_len];
        for h in 0..a.heads {
            let off = h * dh;
            for i in 0..a.q_len {
                let row = &pn[(h * a.q_len + i) * a.kv_len..(h * a.q_len + i + 1) * a.kv_len];
                let doi = &don[i * a.dim + off..i * a.dim + off + dh];
                let mut dot = 0.0f32;
                for j in 0..a.kv_len {
                    let vj = &vn[j * a.dim + off..j * a.dim + off + dh];
                    dp[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += dp[j] * row[j];
                    let dvj = &mut dv[j * a.dim + off..j * a.dim + off + dh];
                    for (d, &g) in dvj.iter_mut().zip(doi) {
                        *d += row[j] * g;
                    }
                }
                for j in 0..a.kv_len {
                    let ds = row[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * a.dim + off + c] += ds * kn[j * a.dim + off + c];
                        dk[j * a.dim + off + c] += ds * qn[i * a.dim + off + c];
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut g = AttnGrads {
        dq: Vec::with_capacity(q.len()),
        dk: Vec::with_capacity(k.len()),
        dv: Vec::with_capacity(v.len()),
    };
    for (dq, dk, dv) in per_sample {
        g.dq.extend(dq);
        g.dk.extend(dk);
        g.dv.extend(dv);
    }
    g
}
