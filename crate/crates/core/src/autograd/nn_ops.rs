//! Fused neural-network operations with hand-written backward rules.

use crate::error::{shape_err, Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::{Op, OpKind, Tape, Var};

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err!("{what} expects an N×C×H×W tensor, got {shape:?}")),
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose input column for tap `kj` lies inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = (self.w + self.pad).saturating_sub(kj).div_ceil(self.stride).min(self.wo);
        (lo.min(hi), hi)
    }
}

/// Unfolds input patches into a `[C·kh·kw, N·Ho·Wo]` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let cols = g.n * g.plane();
    let mut col = vec![T::zero(); g.rows() * cols];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * g.plane()..(n + 1) * g.plane()];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = g.valid_ox(kj);
                        if g.stride == 1 {
                            let start = lo + kj - g.pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst_row[ox] = src_row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T]) -> Vec<T> {
    let cols = g.n * g.plane();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[n * g.plane()..(n + 1) * g.plane()];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = g.valid_ox(kj);
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kj - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    want_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let cols = g.n * g.plane();
    let p = g.plane();
    // [N, O, P] -> [O, N·P]
    let mut gmat = vec![T::zero(); g.o * cols];
    for n in 0..g.n {
        for o in 0..g.o {
            let src = &gout.data()[(n * g.o + o) * p..(n * g.o + o + 1) * p];
            gmat[o * cols + n * p..o * cols + (n + 1) * p].copy_from_slice(src);
        }
    }
    let gb: Vec<T> = (0..g.o).map(|o| gmat[o * cols..(o + 1) * cols].iter().copied().sum()).collect();

    let col = im2col(g, x.data());
    let mut gw = vec![T::zero(); g.o * g.rows()];
    T::gemm(g.o, cols, g.rows(), T::one(), &gmat, false, &col, true, T::zero(), &mut gw);
    drop(col);

    let gx = want_x.then(|| {
        let mut gcol = vec![T::zero(); g.rows() * cols];
        T::gemm(g.rows(), g.o, cols, T::one(), w.data(), true, &gmat, false, T::zero(), &mut gcol);
        Tensor::from_parts(vec![g.n, g.c, g.h, g.w], col2im(g, &gcol))
    });
    (
        gx,
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![g.o], gb),
    )
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = g.shape();
    let (n, c) = (shape[0], shape[1]);
    let plane = g.numel() / (n * c);
    let m = T::lit((n * plane) as f64);
    let gd = g.data();
    let mut gx = vec![T::zero(); g.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                sum_g += gd[i];
                sum_gx += gd[i] * xhat[i];
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let scale = gamma.data()[ch] * inv_std[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = if train {
                    scale * (gd[i] - sum_g / m - xhat[i] * sum_gx / m)
                } else {
                    scale * gd[i]
                };
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

/// Per-axis source taps for half-pixel bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisTaps {
    /// Source position of output `o` is `(o + 0.5)·in/out − 0.5`, clamped at 0.
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            w_hi: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_hi.push(src - lo as f64);
        }
        taps
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    rows: AxisTaps,
    cols: AxisTaps,
}

fn resize_planes<T: Scalar>(plan: &ResizePlan, planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (plan.rows.lo.len(), plan.cols.lo.len());
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = (plan.rows.lo[oy], plan.rows.hi[oy]);
            let wy1 = T::lit(plan.rows.w_hi[oy]);
            let wy0 = T::one() - wy1;
            for ox in 0..ow {
                let (x0, x1) = (plan.cols.lo[ox], plan.cols.hi[ox]);
                let wx1 = T::lit(plan.cols.w_hi[ox]);
                let wx0 = T::one() - wx1;
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(plan: &ResizePlan, in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
    let (oh, ow) = (plan.rows.lo.len(), plan.cols.lo.len());
    let planes = g.numel() / (oh * ow);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (plan.rows.lo[oy], plan.rows.hi[oy]);
            let wy1 = T::lit(plan.rows.w_hi[oy]);
            let wy0 = T::one() - wy1;
            for ox in 0..ow {
                let (x0, x1) = (plan.cols.lo[ox], plan.cols.hi[ox]);
                let wx1 = T::lit(plan.cols.w_hi[ox]);
                let wx0 = T::one() - wx1;
                let gv = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * gv;
                dst[y0 * w + x1] += wy0 * wx1 * gv;
                dst[y1 * w + x0] += wy1 * wx0 * gv;
                dst[y1 * w + x1] += wy1 * wx1 * gv;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

/// Bilinear resampling of the two trailing axes of any tensor of rank ≥ 2,
/// half-pixel centres, no corner alignment. Usable outside a tape (images).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (plan, shape) = resize_plan(x.shape(), out_h, out_w)?;
    let (h, w) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    let planes = x.numel() / (h * w);
    Ok(Tensor::from_parts(shape, resize_planes(&plan, planes, h, w, x.data())))
}

fn resize_plan(shape: &[usize], out_h: usize, out_w: usize) -> Result<(ResizePlan, Vec<usize>)> {
    if shape.len() < 2 {
        return Err(shape_err!("resize needs rank ≥ 2, got {shape:?}"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(SagError::InvalidArgument("resize to zero extent".into()));
    }
    let r = shape.len();
    let plan = ResizePlan {
        rows: AxisTaps::new(shape[r - 2], out_h),
        cols: AxisTaps::new(shape[r - 1], out_w),
    };
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = out_h;
    out_shape[r - 1] = out_w;
    Ok((plan, out_shape))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = y.shape()[0];
    let per = y.numel() / n;
    let mut gx = vec![T::zero(); y.numel()];
    for s in 0..n {
        let ys = &y.data()[s * per..(s + 1) * per];
        let gs = &g.data()[s * per..(s + 1) * per];
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for i in 0..per {
            gx[s * per + i] = ys[i] * (gs[i] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

pub(crate) fn l2_normalize_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], eps: T, g: &Tensor<T>) -> Tensor<T> {
    let n = y.shape()[0];
    let per = y.numel() / n;
    let mut gx = vec![T::zero(); y.numel()];
    for s in 0..n {
        let ys = &y.data()[s * per..(s + 1) * per];
        let gs = &g.data()[s * per..(s + 1) * per];
        let out = &mut gx[s * per..(s + 1) * per];
        if norms[s] > eps {
            let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
            for i in 0..per {
                out[i] = (gs[i] - ys[i] * dot) / norms[s];
            }
        } else {
            // Denominator is the constant eps in this regime.
            for i in 0..per {
                out[i] = gs[i] / eps;
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut gx = vec![T::zero(); n * d];
    T::gemm(n, k, d, T::one(), g.data(), false, w.data(), false, T::zero(), &mut gx);
    let mut gw = vec![T::zero(); k * d];
    T::gemm(k, n, d, T::one(), g.data(), true, x.data(), false, T::zero(), &mut gw);
    let gb: Vec<T> = (0..k).map(|j| (0..n).map(|i| g.data()[i * k + j]).sum()).collect();
    (
        Tensor::from_parts(vec![n, d], gx),
        Tensor::from_parts(vec![k, d], gw),
        Tensor::from_parts(vec![k], gb),
    )
}

pub(crate) fn gap_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let plane = in_shape[2] * in_shape[3];
    let inv = T::one() / T::lit(plane as f64);
    Tensor::from_fn(in_shape, |i| g.data()[i / plane] * inv)
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the N·H·W positions.
    pub var: Vec<T>,
    /// Number of positions each statistic was computed over.
    pub count: usize,
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution. `w` is `[O, C, kh, kw]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.shape(x), "conv2d input")?;
        let (o, wc, kh, kw) = dims4(self.shape(w), "conv2d weight")?;
        if wc != c {
            return Err(shape_err!("conv2d: input has {c} channels, weight expects {wc}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!("conv2d bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(SagError::InvalidArgument("conv2d stride 0".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!("conv2d kernel {kh}×{kw} larger than padded input {h}×{wd}"));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = n * geom.plane();
        let col = im2col(&geom, self.value(x).data());
        let mut mat = vec![T::zero(); o * cols];
        T::gemm(o, geom.rows(), cols, T::one(), self.value(w).data(), false, &col, false, T::zero(), &mut mat);
        drop(col);
        let p = geom.plane();
        let mut out = vec![T::zero(); n * o * p];
        for s in 0..n {
            for oc in 0..o {
                let bias = b.map_or(T::zero(), |b| self.value(b).data()[oc]);
                let src = &mat[oc * cols + s * p..oc * cols + (s + 1) * p];
                let dst = &mut out[(s * o + oc) * p..(s * o + oc + 1) * p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, o, geom.ho, geom.wo], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(OpKind::Conv2d, value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(shape_err!("batch norm needs N×C×…, got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batch norm affine params must be [{c}]"));
        }
        Ok((n, c, self.value(x).numel() / (n * c)))
    }

    /// Batch norm normalising with the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let xd = self.value(x).data();
        let m = n * plane;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
            }
            let mu = s / T::lit(m as f64);
            let mut v = T::zero();
            for b in 0..n {
                for &xv in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    v += (xv - mu) * (xv - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / T::lit(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let var_out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((var_out, BatchStats { mean, var, count: m }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics must have {c} entries"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, train: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let plane = xv.numel() / (n * c);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        let chunks = xv.data().chunks(plane).zip(xhat.chunks_mut(plane)).zip(out.chunks_mut(plane));
        for (k, ((xs, hs), os)) in chunks.enumerate() {
            let ch = k % c;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for ((&xi, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                *h = (xi - mu) * is;
                *o = ga * *h + be;
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            OpKind::BatchNorm,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Non-overlapping `k×k` max pooling (stride `k`); extents must divide.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "max_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("max_pool2d window {k} does not tile {h}×{w}"));
        }
        let (oh, ow) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(OpKind::MaxPool, value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Bilinear resampling of the trailing two axes to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (plan, shape) = resize_plan(self.shape(x), out_h, out_w)?;
        let xs = self.shape(x);
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.value(x).numel() / (h * w);
        let value = Tensor::from_parts(shape, resize_planes(&plan, planes, h, w, self.value(x).data()));
        Ok(self.push(OpKind::Resize, value, Op::Resize { x, plan }, &[x]))
    }

    /// Bilinear ×2 upsampling: `(H, W) -> (⌊2H⌋, ⌊2W⌋)`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(shape_err!("upsample needs rank ≥ 2, got {xs:?}"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        self.resize_bilinear(x, h * 2, w * 2)
    }

    /// Softmax over all non-batch positions of each sample, max-shifted.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(shape_err!("spatial softmax needs a batch axis, got {:?}", xv.shape()));
        }
        let n = xv.shape()[0];
        let per = xv.numel() / n;
        let mut out = vec![T::zero(); xv.numel()];
        for s in 0..n {
            let src = &xv.data()[s * per..(s + 1) * per];
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[s * per..(s + 1) * per];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mx).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(OpKind::SpatialSoftmax, value, Op::SpatialSoftmax(x), &[x]))
    }

    /// `v / max(‖v‖₂, eps)` per sample over all non-batch axes.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(shape_err!("l2_normalize needs a batch axis, got {:?}", xv.shape()));
        }
        let n = xv.shape()[0];
        let per = xv.numel() / n;
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![T::zero(); xv.numel()];
        for s in 0..n {
            let src = &xv.data()[s * per..(s + 1) * per];
            let norm = src.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            for (d, &v) in out[s * per..(s + 1) * per].iter_mut().zip(src) {
                *d = v / denom;
            }
            norms.push(norm);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(OpKind::L2Normalize, value, Op::L2Normalize { x, norms, eps }, &[x]))
    }

    /// Summed negative log-likelihood of `labels` under a fused log-softmax
    /// of `logits` (`[N, K]`). Returns a rank-0 tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = match *lv.shape() {
            [n, k] => (n, k),
            _ => return Err(shape_err!("cross entropy expects [N, K] logits, got {:?}", lv.shape())),
        };
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= k) {
            return Err(SagError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (s, &y) in labels.iter().enumerate() {
            let row = &lv.data()[s * k..(s + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + total.ln();
            loss += lse - row[y];
            for j in 0..k {
                probs[s * k + j] = (row[j] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        Ok(self.push(
            OpKind::CrossEntropy,
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels, probs },
            &[logits],
        ))
    }

    /// `x·wᵀ + b` with `x: [N, D]`, `w: [K, D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = match *self.shape(x) {
            [n, d] => (n, d),
            ref s => return Err(shape_err!("linear expects [N, D] input, got {s:?}")),
        };
        let k = match *self.shape(w) {
            [k, wd] if wd == d => k,
            ref s => return Err(shape_err!("linear weight {s:?} does not match input width {d}")),
        };
        if self.shape(b) != [k] {
            return Err(shape_err!("linear bias {:?} for {k} outputs", self.shape(b)));
        }
        let mut out = vec![T::zero(); n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(n, d, k, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let value = Tensor::from_parts(vec![n, k], out);
        Ok(self.push(OpKind::Linear, value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "global_avg_pool")?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let xd = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|p| xd[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(OpKind::GlobalAvgPool, value, Op::GlobalAvgPool(x), &[x]))
    }
}
