//! Fused neural-network operations with hand-written adjoints.
//!
//! All image tensors are NCHW and contiguous.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, IxDyn};

use crate::tape::Var;
use crate::Array;

/// Stride and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

pub(crate) enum NnOp {
    Conv2d {
        input: usize,
        weight: usize,
        spec: Conv2dSpec,
    },
    LogSoftmax {
        input: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Array,
        inv_std: Vec<f64>,
    },
    Upsample2x {
        input: usize,
    },
    Filter3x3 {
        input: usize,
        kernel: [[f64; 3]; 3],
    },
}

/// Result of a training-mode batch normalization.
pub struct BatchNormOutput<'t> {
    pub out: Var<'t>,
    /// Per-channel batch mean.
    pub mean: Array1<f64>,
    /// Per-channel batch variance (biased, divisor = element count).
    pub var: Array1<f64>,
}

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn contiguous(a: &Array) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// Output columns `ow` whose input column `ow * s + kj - p` lies inside
/// `0..w`, as a half-open range.
fn valid_cols(kj: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    // ow * s + kj >= p  and  ow * s + kj < w + p
    let lo = p.saturating_sub(kj).div_ceil(s);
    let hi = if w + p > kj { (w + p - kj).div_ceil(s).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[C, H, W]` image into the `[C*k*k, Ho*Wo]` block of a
/// column matrix with row stride `ld`. Padding positions are never written,
/// so `out` must start zeroed and may be reused across batches of the same
/// shape.
fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    out: &mut [f64],
    ld: usize,
) {
    let hw = ho * wo;
    let (s, p) = (spec.stride, spec.padding);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * ld..row * ld + hw];
                let (lo, hi) = valid_cols(kj, s, p, w, wo);
                for oh in 0..ho {
                    let ih = oh * s + ki;
                    if ih < p || ih >= h + p {
                        continue;
                    }
                    let srow = &src[(ih - p) * w..(ih - p + 1) * w];
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if s == 1 {
                        let first = lo + kj - p;
                        drow[lo..hi].copy_from_slice(&srow[first..first + hi - lo]);
                    } else {
                        for (ow, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[(lo + ow) * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one image.
fn col2im(
    cols: &[f64],
    ld: usize,
    (c, h, w): (usize, usize, usize),
    k: usize,
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    x: &mut [f64],
) {
    let hw = ho * wo;
    let (s, p) = (spec.stride, spec.padding);
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + hw];
                let (lo, hi) = valid_cols(kj, s, p, w, wo);
                for oh in 0..ho {
                    let ih = oh * s + ki;
                    if ih < p || ih >= h + p {
                        continue;
                    }
                    let drow = &mut dst[(ih - p) * w..(ih - p + 1) * w];
                    let srow = &src[oh * wo..(oh + 1) * wo];
                    if s == 1 {
                        let first = lo + kj - p;
                        for (d, v) in drow[first..first + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ow, v) in srow[lo..hi].iter().enumerate() {
                            drow[(lo + ow) * s + kj - p] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of one convolution, fixed at record time.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn of(x: &Array, wv: &Array, spec: Conv2dSpec) -> Self {
        let (n, c, h, w) = dims4(x);
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv input channels: weight expects {}, input has {c}", ws[1]);
        assert_eq!(ws[3], k, "square kernels only");
        assert!(
            h + 2 * spec.padding >= k && w + 2 * spec.padding >= k,
            "kernel larger than padded input"
        );
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
        Self { n, c, h, w, o, k, ho, wo }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn image(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Images per gemm: enough columns to amortize the call, few enough
    /// for the column block to stay in cache.
    fn chunk(&self) -> usize {
        (GEMM_COLUMNS / self.out_plane()).clamp(1, self.n.max(1))
    }
}

const GEMM_COLUMNS: usize = 256;

fn weight_matrix(wv: &Array, g: &ConvGeom) -> Array2<f64> {
    wv.to_shape((g.o, g.rows())).expect("conv weight reshape").into_owned()
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

impl<'t> Var<'t> {
    /// Square-kernel 2-D convolution (cross-correlation), no bias.
    /// `self` is `[N, C, H, W]`, `weight` is `[O, C, k, k]`.
    pub fn conv2d(&self, weight: Var<'t>, spec: Conv2dSpec) -> Var<'t> {
        let x = self.value();
        let wv = weight.value();
        let g = ConvGeom::of(&x, &wv, spec);
        let xs = contiguous(&x);
        let w2 = weight_matrix(&wv, &g);
        let hw = g.out_plane();
        let nb = g.chunk();
        let mut out = vec![0.0; g.n * g.o * hw];
        let mut cols = Array2::zeros((g.rows(), nb * hw));
        let mut prod = Array2::zeros((g.o, nb * hw));
        for start in (0..g.n).step_by(nb) {
            let m = nb.min(g.n - start);
            let ld = nb * hw;
            for j in 0..m {
                let ni = start + j;
                im2col(
                    &xs[ni * g.image()..(ni + 1) * g.image()],
                    (g.c, g.h, g.w),
                    g.k,
                    spec,
                    (g.ho, g.wo),
                    &mut cols.as_slice_mut().unwrap()[j * hw..],
                    ld,
                );
            }
            let cview = cols.slice(s![.., ..m * hw]);
            let mut pview = prod.slice_mut(s![.., ..m * hw]);
            general_mat_mul(1.0, &w2, &cview, 0.0, &mut pview);
            for j in 0..m {
                let img = &mut out[(start + j) * g.o * hw..(start + j + 1) * g.o * hw];
                for (oi, dst) in img.chunks_exact_mut(hw).enumerate() {
                    dst.copy_from_slice(&prod.as_slice().unwrap()[oi * ld + j * hw..oi * ld + (j + 1) * hw]);
                }
            }
        }
        let value = Array::from_shape_vec(IxDyn(&[g.n, g.o, g.ho, g.wo]), out).unwrap();
        self.record_nn(
            &[self.id(), weight.id()],
            value,
            NnOp::Conv2d {
                input: self.id(),
                weight: weight.id(),
                spec,
            },
        )
    }

    /// Row-wise log-softmax of a `[B, K]` matrix.
    pub fn log_softmax(&self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "log_softmax expects [B, K]");
        let mut out = (*x).clone();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.record_nn(&[self.id()], out, NnOp::LogSoftmax { input: self.id() })
    }

    /// Training-mode batch normalization over every axis but 1.
    /// `gamma` and `beta` have shape `[C]`.
    pub fn batch_norm_train(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> BatchNormOutput<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "batch norm needs a channel axis");
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = (n * inner) as f64;
        let xs = contiguous(&x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let chunk = &xs[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                mean[ci] += chunk.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for ni in 0..n {
            for ci in 0..c {
                let chunk = &xs[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                var[ci] += chunk.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = gamma.value();
        let bv = beta.value();
        let (gs, bs) = (contiguous(&gv), contiguous(&bv));
        assert_eq!(gs.len(), c, "gamma length");
        assert_eq!(bs.len(), c, "beta length");
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                for i in r {
                    let h = (xs[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gs[ci] * h + bs[ci];
                }
            }
        }
        let dim = IxDyn(&shape);
        let outv = self.record_nn(
            &[self.id(), gamma.id(), beta.id()],
            Array::from_shape_vec(dim.clone(), out).unwrap(),
            NnOp::BatchNorm {
                input: self.id(),
                gamma: gamma.id(),
                beta: beta.id(),
                xhat: Array::from_shape_vec(dim, xhat).unwrap(),
                inv_std,
            },
        );
        BatchNormOutput {
            out: outv,
            mean: Array1::from(mean),
            var: Array1::from(var),
        }
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let xs = contiguous(&x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Array::from_shape_vec(IxDyn(&[n, c, h2, w2]), out).unwrap();
        self.record_nn(&[self.id()], value, NnOp::Upsample2x { input: self.id() })
    }

    /// Depthwise 3x3 filter with reflect padding, same kernel on every channel.
    pub fn filter3x3_reflect(&self, kernel: [[f64; 3]; 3]) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let xs = contiguous(&x);
        let mut out = vec![0.0; xs.len()];
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h * w..(plane + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (a, krow) in kernel.iter().enumerate() {
                        let ii = reflect(i as isize + a as isize - 1, h);
                        for (b, &kv) in krow.iter().enumerate() {
                            let jj = reflect(j as isize + b as isize - 1, w);
                            acc += kv * src[ii * w + jj];
                        }
                    }
                    dst[i * w + j] = acc;
                }
            }
        }
        let value = Array::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.record_nn(
            &[self.id()],
            value,
            NnOp::Filter3x3 {
                input: self.id(),
                kernel,
            },
        )
    }
}

pub(crate) fn backprop<'a>(
    op: &NnOp,
    val: impl Fn(usize) -> &'a Array,
    needs: impl Fn(usize) -> bool,
    out: &Array,
    g: &Array,
) -> Vec<(usize, Array)> {
    match op {
        NnOp::Conv2d { input, weight, spec } => {
            let (xv, wv) = (val(*input), val(*weight));
            let geo = ConvGeom::of(xv, wv, *spec);
            let hw = geo.out_plane();
            let nb = geo.chunk();
            let ld = nb * hw;
            let (need_x, need_w) = (needs(*input), needs(*weight));
            let gs = contiguous(g);
            let xs = contiguous(xv);
            let w2 = weight_matrix(wv, &geo);
            let mut dw = Array2::zeros((geo.o, geo.rows()));
            let mut dx = vec![0.0; if need_x { geo.n * geo.image() } else { 0 }];
            let mut cols = Array2::zeros((geo.rows(), ld));
            let mut dcols = Array2::zeros((geo.rows(), ld));
            let mut gchunk = Array2::zeros((geo.o, ld));
            for start in (0..geo.n).step_by(nb) {
                let m = nb.min(geo.n - start);
                {
                    let gbuf = gchunk.as_slice_mut().unwrap();
                    for j in 0..m {
                        let img = &gs[(start + j) * geo.o * hw..(start + j + 1) * geo.o * hw];
                        for (oi, src) in img.chunks_exact(hw).enumerate() {
                            gbuf[oi * ld + j * hw..oi * ld + (j + 1) * hw].copy_from_slice(src);
                        }
                    }
                }
                let gview = gchunk.slice(s![.., ..m * hw]);
                if need_w {
                    for j in 0..m {
                        let ni = start + j;
                        im2col(
                            &xs[ni * geo.image()..(ni + 1) * geo.image()],
                            (geo.c, geo.h, geo.w),
                            geo.k,
                            *spec,
                            (geo.ho, geo.wo),
                            &mut cols.as_slice_mut().unwrap()[j * hw..],
                            ld,
                        );
                    }
                    general_mat_mul(1.0, &gview, &cols.slice(s![.., ..m * hw]).t(), 1.0, &mut dw);
                }
                if need_x {
                    general_mat_mul(1.0, &w2.t(), &gview, 0.0, &mut dcols.slice_mut(s![.., ..m * hw]));
                    for j in 0..m {
                        let ni = start + j;
                        col2im(
                            &dcols.as_slice().unwrap()[j * hw..],
                            ld,
                            (geo.c, geo.h, geo.w),
                            geo.k,
                            *spec,
                            (geo.ho, geo.wo),
                            &mut dx[ni * geo.image()..(ni + 1) * geo.image()],
                        );
                    }
                }
            }
            let mut grads = Vec::with_capacity(2);
            if need_x {
                let shape = IxDyn(&[geo.n, geo.c, geo.h, geo.w]);
                grads.push((*input, Array::from_shape_vec(shape, dx).unwrap()));
            }
            if need_w {
                let shape = IxDyn(&[geo.o, geo.c, geo.k, geo.k]);
                grads.push((*weight, dw.into_shape_with_order(shape).unwrap()));
            }
            grads
        }
        NnOp::LogSoftmax { input } => {
            let mut gx = g.clone();
            for (mut grow, orow) in gx.rows_mut().into_iter().zip(out.rows()) {
                let s: f64 = grow.sum();
                ndarray::Zip::from(&mut grow)
                    .and(&orow)
                    .for_each(|gv, &lp| *gv -= lp.exp() * s);
            }
            vec![(*input, gx)]
        }
        NnOp::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let shape = xhat.shape().to_vec();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let count = (n * inner) as f64;
            let gs = contiguous(g);
            let xh = contiguous(xhat);
            let gam = contiguous(val(*gamma)).into_owned();
            let mut dbeta = vec![0.0; c];
            let mut dgamma = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    for i in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                        dbeta[ci] += gs[i];
                        dgamma[ci] += gs[i] * xh[i];
                    }
                }
            }
            // dxhat = g * gamma; sum(dxhat) = gamma*dbeta; sum(dxhat*xhat) = gamma*dgamma
            let mut dx = vec![0.0; gs.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let k = gam[ci] * inv_std[ci] / count;
                    for i in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                        dx[i] = k * (count * gs[i] - dbeta[ci] - xh[i] * dgamma[ci]);
                    }
                }
            }
            vec![
                (*input, Array::from_shape_vec(IxDyn(&shape), dx).unwrap()),
                (*gamma, Array::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                (*beta, Array::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
            ]
        }
        NnOp::Upsample2x { input } => {
            let (n, c, h, w) = dims4(val(*input));
            let gs = contiguous(g);
            let (h2, w2) = (2 * h, 2 * w);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let src = &gs[plane * h2 * w2..(plane + 1) * h2 * w2];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                    }
                }
            }
            vec![(
                *input,
                Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
            )]
        }
        NnOp::Filter3x3 { input, kernel } => {
            let (n, c, h, w) = dims4(val(*input));
            let gs = contiguous(g);
            let mut dx = vec![0.0; gs.len()];
            for plane in 0..n * c {
                let src = &gs[plane * h * w..(plane + 1) * h * w];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let gv = src[i * w + j];
                        for (a, krow) in kernel.iter().enumerate() {
                            let ii = reflect(i as isize + a as isize - 1, h);
                            for (b, &kv) in krow.iter().enumerate() {
                                let jj = reflect(j as isize + b as isize - 1, w);
                                dst[ii * w + jj] += kv * gv;
                            }
                        }
                    }
                }
            }
            vec![(
                *input,
                Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
            )]
        }
    }
}
