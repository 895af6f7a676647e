//! Pure forward kernels and their vector-Jacobian products.
//!
//! Every kernel accumulates each output element in ascending row-major order
//! of its contributing inputs, then adds the bias last. Two kernels that
//! visit the same products in the same order therefore agree bitwise.

use super::{Real, Tensor};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Output positions `o` in `0..out_len` for which `o*stride + k - pad` lies
/// inside `0..in_len`.
#[inline]
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - pad <= in_len - 1
    let top = in_len + pad;
    let hi = if top > k {
        ((top - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// One kernel tap's contribution to a convolution backward pass over a
/// single input plane.
struct ConvTap {
    ki: usize,
    kj: usize,
    stride: usize,
    padding: usize,
    w: usize,
    ow: usize,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl ConvTap {
    /// Returns `Σ x·g` for the kernel gradient and adds `wv·g` into `gx`.
    fn accumulate<T: Real>(&self, x: &[T], mut gx: Option<&mut [T]>, go: &[T], wv: T) -> T {
        let mut acc = T::zero();
        let (c0, c1) = self.cols;
        if c0 >= c1 {
            return acc;
        }
        let off = c0 * self.stride + self.kj - self.padding;
        for r in self.rows.0..self.rows.1 {
            let ih = r * self.stride + self.ki - self.padding;
            let grow = &go[r * self.ow + c0..r * self.ow + c1];
            let xrow = &x[ih * self.w + off..];
            if self.stride == 1 {
                let xrow = &xrow[..grow.len()];
                for (&xv, &gv) in xrow.iter().zip(grow) {
                    acc += xv * gv;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gxrow = &mut gx[ih * self.w + off..][..grow.len()];
                    for (d, &gv) in gxrow.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            } else {
                for (q, &gv) in grow.iter().enumerate() {
                    acc += xrow[q * self.stride] * gv;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gxrow = &mut gx[ih * self.w + off..];
                    for (q, &gv) in grow.iter().enumerate() {
                        gxrow[q * self.stride] += wv * gv;
                    }
                }
            }
        }
        acc
    }
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && kernel > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

/// Unrolled receptive fields of one `C×H×W` plane: row `(ci·kH + ki)·kW + kj`
/// holds that tap's input for every output position, zero where it falls in
/// the padding.
struct Im2Col {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn fill<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.oh * self.ow;
        col.fill(T::zero());
        for ci in 0..self.c {
            let xc = &x[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (r0, r1) = valid_range(ki, self.padding, self.stride, self.h, self.oh);
                for kj in 0..self.kw {
                    let (c0, c1) = valid_range(kj, self.padding, self.stride, self.w, self.ow);
                    let dst = &mut col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for r in r0..r1 {
                        let xrow = &xc[(r * self.stride + ki - self.padding) * self.w..][..self.w];
                        let drow = &mut dst[r * self.ow..][..self.ow];
                        for q in c0..c1 {
                            drow[q] = xrow[q * self.stride + kj - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adds the unrolled gradient `gcol` back onto the input plane.
    fn scatter<T: Real>(&self, gcol: &[T], gx: &mut [T]) {
        let p = self.oh * self.ow;
        for ci in 0..self.c {
            let gxc = &mut gx[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (r0, r1) = valid_range(ki, self.padding, self.stride, self.h, self.oh);
                for kj in 0..self.kw {
                    let (c0, c1) = valid_range(kj, self.padding, self.stride, self.w, self.ow);
                    let src = &gcol[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for r in r0..r1 {
                        let ih = r * self.stride + ki - self.padding;
                        let grow = &mut gxc[ih * self.w..][..self.w];
                        let srow = &src[r * self.ow..][..self.ow];
                        for q in c0..c1 {
                            grow[q * self.stride + kj - self.padding] += srow[q];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. `kernel` is `F×C×kH×kW`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    let &[f, kc, kh, kw] = kernel.shape() else {
        return Err(mismatch("conv2d", input.shape(), kernel.shape()));
    };
    if kc != c {
        return Err(mismatch("conv2d", input.shape(), kernel.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(mismatch("conv2d bias", kernel.shape(), b.shape()));
        }
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (
        conv_out_len(h, kh, stride, padding),
        conv_out_len(w, kw, stride, padding),
    ) else {
        return Err(mismatch("conv2d", input.shape(), kernel.shape()));
    };
    let geo = Im2Col {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
    };
    let (kn, p) = (geo.rows(), oh * ow);
    let x = input.data();
    let k = kernel.data();
    let mut col = vec![T::zero(); if geo.is_identity() { 0 } else { kn * p }];
    let mut out = vec![T::zero(); n * f * p];
    for ni in 0..n {
        let xn = &x[ni * c * h * w..][..c * h * w];
        let cols: &[T] = if geo.is_identity() {
            xn
        } else {
            geo.fill(xn, &mut col);
            &col
        };
        for fi in 0..f {
            let o = &mut out[(ni * f + fi) * p..][..p];
            let kf = &k[fi * kn..][..kn];
            for (kidx, &wv) in kf.iter().enumerate() {
                for (ov, &xv) in o.iter_mut().zip(&cols[kidx * p..][..p]) {
                    *ov += wv * xv;
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[fi];
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.nchw().expect("validated in forward");
    let &[f, _, kh, kw] = kernel.shape() else {
        unreachable!("validated in forward")
    };
    let [_, _, oh, ow] = grad_out.nchw().expect("validated in forward");
    let geo = Im2Col {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
    };
    let (kn, p) = (geo.rows(), oh * ow);
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); if need_input { x.len() } else { 0 }];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); f];
    let mut col = vec![T::zero(); if geo.is_identity() { 0 } else { kn * p }];
    let mut gcol = vec![T::zero(); if need_input { kn * p } else { 0 }];
    for ni in 0..n {
        let xn = &x[ni * c * h * w..][..c * h * w];
        let cols: &[T] = if geo.is_identity() {
            xn
        } else {
            geo.fill(xn, &mut col);
            &col
        };
        gcol.fill(T::zero());
        for fi in 0..f {
            let go = &g[(ni * f + fi) * p..][..p];
            gb[fi] += go.iter().copied().sum::<T>();
            for kidx in 0..kn {
                let xr = &cols[kidx * p..][..p];
                let mut acc = T::zero();
                for (&xv, &gv) in xr.iter().zip(go) {
                    acc += xv * gv;
                }
                gk[fi * kn + kidx] += acc;
                if need_input {
                    let wv = k[fi * kn + kidx];
                    for (d, &gv) in gcol[kidx * p..][..p].iter_mut().zip(go) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if need_input {
            let gxn = &mut gx[ni * c * h * w..][..c * h * w];
            if geo.is_identity() {
                gxn.iter_mut().zip(&gcol).for_each(|(d, &v)| *d += v);
            } else {
                geo.scatter(&gcol, gxn);
            }
        }
    }
    (
        need_input.then(|| Tensor::new(input.shape().to_vec(), gx).unwrap()),
        Tensor::new(kernel.shape().to_vec(), gk).unwrap(),
        Tensor::new(vec![f], gb).unwrap(),
    )
}

/// Per-channel spatial convolution. `kernel` is `C×1×kH×kW`.
pub fn depthwise_conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    let &[kc, one, kh, kw] = kernel.shape() else {
        return Err(mismatch("depthwise_conv2d", input.shape(), kernel.shape()));
    };
    if kc != c || one != 1 {
        return Err(mismatch("depthwise_conv2d", input.shape(), kernel.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(mismatch("depthwise_conv2d bias", kernel.shape(), b.shape()));
        }
    }
    if stride == 0 {
        return Err(Error::invalid("depthwise_conv2d stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (
        conv_out_len(h, kh, stride, padding),
        conv_out_len(w, kw, stride, padding),
    ) else {
        return Err(mismatch("depthwise_conv2d", input.shape(), kernel.shape()));
    };
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let o = &mut out[(ni * c + ci) * oh * ow..][..oh * ow];
            let xc = &x[(ni * c + ci) * h * w..][..h * w];
            for ki in 0..kh {
                let (r0, r1) = valid_range(ki, padding, stride, h, oh);
                for kj in 0..kw {
                    let (c0, c1) = valid_range(kj, padding, stride, w, ow);
                    let wv = k[(ci * kh + ki) * kw + kj];
                    for r in r0..r1 {
                        let ih = r * stride + ki - padding;
                        for q in c0..c1 {
                            o[r * ow + q] += wv * xc[ih * w + q * stride + kj - padding];
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[ci];
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn depthwise_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.nchw().expect("validated in forward");
    let &[_, _, kh, kw] = kernel.shape() else {
        unreachable!("validated in forward")
    };
    let [_, _, oh, ow] = grad_out.nchw().expect("validated in forward");
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); if need_input { x.len() } else { 0 }];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let go = &g[(ni * c + ci) * oh * ow..][..oh * ow];
            gb[ci] += go.iter().copied().sum::<T>();
            let base = (ni * c + ci) * h * w;
            for ki in 0..kh {
                let (r0, r1) = valid_range(ki, padding, stride, h, oh);
                for kj in 0..kw {
                    let (c0, c1) = valid_range(kj, padding, stride, w, ow);
                    let kidx = (ci * kh + ki) * kw + kj;
                    let wv = k[kidx];
                    let tap = ConvTap {
                        ki,
                        kj,
                        stride,
                        padding,
                        w,
                        ow,
                        rows: (r0, r1),
                        cols: (c0, c1),
                    };
                    let gxp = need_input.then(|| &mut gx[base..base + h * w]);
                    gk[kidx] += tap.accumulate(&x[base..base + h * w], gxp, go, wv);
                }
            }
        }
    }
    (
        need_input.then(|| Tensor::new(input.shape().to_vec(), gx).unwrap()),
        Tensor::new(kernel.shape().to_vec(), gk).unwrap(),
        Tensor::new(vec![c], gb).unwrap(),
    )
}

/// Depthwise convolution followed by a 1×1 pointwise convolution.
pub fn depthwise_separable_conv<T: Real>(
    input: &Tensor<T>,
    depthwise_kernel: &Tensor<T>,
    depthwise_bias: Option<&Tensor<T>>,
    pointwise_kernel: &Tensor<T>,
    pointwise_bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let pw = pointwise_kernel.shape();
    if pw.len() != 4 || pw[2] != 1 || pw[3] != 1 {
        return Err(mismatch(
            "depthwise_separable_conv pointwise",
            depthwise_kernel.shape(),
            pw,
        ));
    }
    let mid = depthwise_conv2d(input, depthwise_kernel, depthwise_bias, stride, padding)?;
    conv2d(&mid, pointwise_kernel, pointwise_bias, 1, 0)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| T::one() / (T::one() + (-x).exp()))
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [] => Err(Error::invalid("softmax requires a channel axis")),
        [c] => Ok((1, *c, 1)),
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
    }
}

/// Softmax over axis 1 (the channel axis); a rank-1 tensor is one channel vector.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, inner) = channel_layout(input.shape())?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for p in 0..inner {
            let at = |ci: usize| (ni * c + ci) * inner + p;
            let mut m = T::neg_infinity();
            for ci in 0..c {
                m = m.max(x[at(ci)]);
            }
            let mut z = T::zero();
            for ci in 0..c {
                let e = (x[at(ci)] - m).exp();
                out[at(ci)] = e;
                z += e;
            }
            for ci in 0..c {
                out[at(ci)] = out[at(ci)] / z;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, inner) = channel_layout(output.shape()).expect("validated in forward");
    let y = output.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); y.len()];
    for ni in 0..n {
        for p in 0..inner {
            let at = |ci: usize| (ni * c + ci) * inner + p;
            let mut dot = T::zero();
            for ci in 0..c {
                dot += g[at(ci)] * y[at(ci)];
            }
            for ci in 0..c {
                gx[at(ci)] = y[at(ci)] * (g[at(ci)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), gx).unwrap()
}

/// Max pooling; also returns, per output, the flat input index that won
/// (first maximum in row-major window order).
pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.nchw()?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d window and stride must be positive",
        ));
    }
    if window > h || window > w {
        return Err(Error::invalid(format!(
            "maxpool2d window {window} larger than input {h}×{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let mut best = base + r * stride * w + q * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (r * stride + i) * w + q * stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

fn adaptive_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Average pooling to a fixed `out_h×out_w` grid of (possibly overlapping) bins.
pub fn adaptive_avg_pool2d<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::invalid(format!(
            "adaptive pooling to {out_h}×{out_w} from {h}×{w}"
        )));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..out_h {
            let (h0, h1) = adaptive_bounds(r, h, out_h);
            for q in 0..out_w {
                let (w0, w1) = adaptive_bounds(q, w, out_w);
                let mut acc = T::zero();
                for i in h0..h1 {
                    for j in w0..w1 {
                        acc += x[base + i * w + j];
                    }
                }
                out.push(acc / T::lit(((h1 - h0) * (w1 - w0)) as f64));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn adaptive_avg_pool2d_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let [_, _, h, w] = gx.nchw().expect("validated in forward");
    let [n, c, out_h, out_w] = grad_out.nchw().expect("validated in forward");
    let g = grad_out.data();
    let d = gx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..out_h {
            let (h0, h1) = adaptive_bounds(r, h, out_h);
            for q in 0..out_w {
                let (w0, w1) = adaptive_bounds(q, w, out_w);
                let share =
                    g[(plane * out_h + r) * out_w + q] / T::lit(((h1 - h0) * (w1 - w0)) as f64);
                for i in h0..h1 {
                    for j in w0..w1 {
                        d[base + i * w + j] += share;
                    }
                }
            }
        }
    }
    gx
}

/// Affine map `input · weights + bias` for `input` of shape `N×D`.
pub fn dense<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (&[n, d], &[wd, m]) = (input.shape(), weights.shape()) else {
        return Err(mismatch("dense", input.shape(), weights.shape()));
    };
    if d != wd {
        return Err(mismatch("dense", input.shape(), weights.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(mismatch("dense bias", weights.shape(), b.shape()));
        }
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); n * m];
    for ni in 0..n {
        let row = &mut out[ni * m..][..m];
        for di in 0..d {
            let xv = x[ni * d + di];
            let wrow = &wt[di * m..][..m];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        if let Some(b) = bias {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let &[n, d] = input.shape() else {
        unreachable!("validated in forward")
    };
    let m = weights.shape()[1];
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * d];
    let mut gw = vec![T::zero(); d * m];
    let mut gb = vec![T::zero(); m];
    for ni in 0..n {
        let grow = &g[ni * m..][..m];
        for (b, &gv) in gb.iter_mut().zip(grow) {
            *b += gv;
        }
        for di in 0..d {
            let xv = x[ni * d + di];
            let wrow = &wt[di * m..][..m];
            let gwrow = &mut gw[di * m..][..m];
            let mut acc = T::zero();
            for j in 0..m {
                acc += grow[j] * wrow[j];
                gwrow[j] += xv * grow[j];
            }
            gx[ni * d + di] = acc;
        }
    }
    (
        Tensor::new(vec![n, d], gx).unwrap(),
        Tensor::new(vec![d, m], gw).unwrap(),
        Tensor::new(vec![m], gb).unwrap(),
    )
}

/// Source sample for one output coordinate under half-pixel centres.
#[derive(Clone, Copy, Debug)]
struct ResizeTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<ResizeTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            ResizeTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear interpolation with align-corners disabled.
pub fn bilinear_resize<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bilinear_resize target must be at least 1×1",
        ));
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &x[plane * h * w..][..h * w];
        for rt in &rows {
            let ly = T::lit(rt.frac);
            for ct in &cols {
                let lx = T::lit(ct.frac);
                let top = p[rt.lo * w + ct.lo] * (T::one() - lx) + p[rt.lo * w + ct.hi] * lx;
                let bot = p[rt.hi * w + ct.lo] * (T::one() - lx) + p[rt.hi * w + ct.hi] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    Tensor::new(shape, out)
}

pub fn bilinear_resize_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let [n, c, h, w] = gx.nchw().expect("validated in forward");
    let [.., out_h, out_w] = grad_out.nchw().expect("validated in forward");
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let g = grad_out.data();
    let d = gx.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for rt in &rows {
            let ly = T::lit(rt.frac);
            for ct in &cols {
                let lx = T::lit(ct.frac);
                let gv = g[k];
                k += 1;
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                d[base + rt.lo * w + ct.lo] += top * (T::one() - lx);
                d[base + rt.lo * w + ct.hi] += top * lx;
                d[base + rt.hi * w + ct.lo] += bot * (T::one() - lx);
                d[base + rt.hi * w + ct.hi] += bot * lx;
            }
        }
    }
    gx
}

/// Concatenates `N×Cᵢ×H×W` tensors along the channel axis.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
    let [n, _, h, w] = first.nchw()?;
    let mut total_c = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.nchw()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(mismatch("concat_channels", first.shape(), t.shape()));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for ni in 0..n {
        for t in inputs {
            let tc = t.nchw()?[1];
            out.extend_from_slice(&t.data()[ni * tc * plane..][..tc * plane]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Real>(grad: &Tensor<T>, shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
    let [n, total_c, h, w] = grad.nchw().expect("validated in forward");
    let plane = h * w;
    let g = grad.data();
    let mut parts: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for ni in 0..n {
        let mut offset = 0;
        for (part, s) in parts.iter_mut().zip(shapes) {
            let tc = s.iter().product::<usize>() / (n * plane);
            part.extend_from_slice(&g[(ni * total_c + offset) * plane..][..tc * plane]);
            offset += tc;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(p, s)| Tensor::new(s.clone(), p).unwrap())
        .collect()
}

/// Elementwise maximum across same-shape tensors; the winner index is the
/// first input holding the maximum.
pub fn elementwise_max<T: Real>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("elementwise_max needs at least one input"))?;
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(mismatch("elementwise_max", first.shape(), t.shape()));
        }
    }
    let mut out = first.data().to_vec();
    let mut win = vec![0usize; out.len()];
    for (vi, t) in inputs.iter().enumerate().skip(1) {
        for ((o, wi), &v) in out.iter_mut().zip(win.iter_mut()).zip(t.data()) {
            if v > *o {
                *o = v;
                *wi = vi;
            }
        }
    }
    Ok((Tensor::new(first.shape().to_vec(), out)?, win))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_scalar_kernel_scales() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y, Tensor::full(&[1, 1, 3, 3], 2.0));
    }

    #[test]
    fn conv2d_hand_dot_product() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &k, Some(&t(&[1], &[0.0])), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv2d_zero_kernel_annihilates() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 5, 4], |i| i as f64 * 0.37 - 3.0);
        let k = Tensor::zeros(&[2, 3, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_naming_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let msg = conv2d(&x, &k, None, 1, 1).unwrap_err().to_string();
        assert!(
            msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn conv2d_same_padding_preserves_size() {
        for k in [1, 3, 5] {
            let x = Tensor::<f64>::zeros(&[1, 1, 7, 9]);
            let kern = Tensor::zeros(&[2, 1, k, k]);
            let y = conv2d(&x, &kern, None, 1, (k - 1) / 2).unwrap();
            assert_eq!(y.shape(), &[1, 2, 7, 9]);
        }
    }

    #[test]
    fn conv2d_padding_matches_explicit_zero_border() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| (i as f64).sin());
        let k = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.7).cos());
        let padded = Tensor::from_fn(&[1, 2, 5, 6], |i| {
            let (c, r, q) = (i / 30, (i / 6) % 5, i % 6);
            if r == 0 || r == 4 || q == 0 || q == 5 {
                0.0
            } else {
                x.data()[c * 12 + (r - 1) * 4 + (q - 1)]
            }
        });
        for stride in [1, 2] {
            let a = conv2d(&x, &k, None, stride, 1).unwrap();
            let b = conv2d(&padded, &k, None, stride, 0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn depthwise_separable_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| i as f64);
        let dw = Tensor::full(&[3, 1, 1, 1], 1.0);
        let pw = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = depthwise_separable_conv(&x, &dw, None, &pw, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_zero_kernel_zero_output() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| i as f64 - 7.0);
        let dw = Tensor::zeros(&[2, 1, 3, 3]);
        let pw = Tensor::from_fn(&[4, 2, 1, 1], |i| i as f64 + 1.0);
        let y = depthwise_separable_conv(&x, &dw, None, &pw, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let dw = Tensor::zeros(&[3, 1, 3, 3]);
        assert!(depthwise_conv2d(&x, &dw, None, 1, 1).is_err());
    }

    #[test]
    fn softmax_closed_form() {
        let y = softmax_channels(&t(&[1, 2], &[0.0, 2f64.ln()])).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = softmax_channels(&Tensor::<f64>::full(&[1, 5], 0.3)).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn maxpool_basics() {
        let (y, arg) = maxpool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (c, _) = maxpool2d(&Tensor::<f64>::full(&[1, 2, 4, 6], 1.5), 2, 2).unwrap();
        assert_eq!(c, Tensor::full(&[1, 2, 2, 3], 1.5));
        let (_, tie) = maxpool2d(&Tensor::<f64>::full(&[1, 1, 2, 2], 0.0), 2, 2).unwrap();
        assert_eq!(tie, vec![0]);
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 2, 2]), 3, 1).is_err());
    }

    #[test]
    fn dense_hand_arithmetic() {
        let y = dense(
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 1], &[1.0, 1.0]),
            Some(&t(&[1], &[0.5])),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.5]);
        let x = t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &eye, None).unwrap(), x);
        let b = t(&[3], &[0.1, 0.2, 0.3]);
        let z = dense(&x, &Tensor::zeros(&[2, 3]), Some(&b)).unwrap();
        assert_eq!(z.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        assert!(dense(&x, &Tensor::zeros(&[3, 3]), None).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 5], |i| (i as f64).sqrt());
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let c = bilinear_resize(&t(&[1, 1, 1, 1], &[0.7]), 4, 6).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn bilinear_half_pixel_weights() {
        // Source coordinate of output column o is (o + 0.5) * 2/4 - 0.5,
        // clamped at 0: [-0.25 -> 0, 0.25, 0.75, 1.25 -> clamp to last].
        let expected_row = [0.0, 0.25, 0.75, 1.0];
        let y = bilinear_resize(&t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]), 2, 4).unwrap();
        for r in 0..2 {
            assert_eq!(&y.data()[r * 4..r * 4 + 4], &expected_row);
        }
    }

    #[test]
    fn adaptive_pool_covers_input() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let y = adaptive_avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        let g = adaptive_avg_pool2d(&x, 1, 1).unwrap();
        assert_eq!(g.data(), &[7.5]);
        assert!(adaptive_avg_pool2d(&x, 5, 5).is_err());
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&c, &[a.shape().to_vec(), b.shape().to_vec()]);
        assert_eq!(parts, vec![a, b]);
    }
}
