//! Forward and backward kernels for the layer types used by the planted
//! networks. All kernels are pure; parallel variants write disjoint output
//! chunks and sum in a fixed order, so results do not depend on the thread
//! count.

use rayon::prelude::*;

use super::Tensor4;
use crate::error::{Error, Result};

/// Spatial extent of every convolution kernel.
pub const KERNEL: usize = 3;

fn check_conv(input: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<()> {
    let [_, ci, _, _] = input.dims();
    let [co, wci, kh, kw] = weight.dims();
    if kh != KERNEL || kw != KERNEL {
        return Err(Error::shape(format!(
            "conv kernel must be {KERNEL}x{KERNEL}, got {kh}x{kw}"
        )));
    }
    if wci != ci {
        return Err(Error::shape(format!(
            "conv input has {ci} channels, kernel expects {wci}"
        )));
    }
    if bias.len() != co {
        return Err(Error::shape(format!(
            "conv bias has {} entries for {co} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// Valid output range `[lo, hi)` along one axis for a tap offset `d`
/// (`-1`, `0` or `1`) under zero padding of one.
#[inline]
fn tap_range(d: isize, size: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (size as isize - d).min(size as isize) as usize;
    (lo, hi)
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv2d(input: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    check_conv(input, weight, bias)?;
    let [n, ci, h, w] = input.dims();
    let co = weight.dims()[0];
    let plane = h * w;
    let mut out = Tensor4::zeros([n, co, h, w]);
    let x = input.data();
    let k = weight.data();
    let b = bias.data();

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (bi, o) = (idx / co, idx % co);
            dst.fill(b[o]);
            for i in 0..ci {
                let src = &x[(bi * ci + i) * plane..][..plane];
                let taps = &k[(o * ci + i) * 9..][..9];
                for ky in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..KERNEL {
                        let dx = kx as isize - 1;
                        let (x0, x1) = tap_range(dx, w);
                        let wv = taps[ky * KERNEL + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w..][(x0 as isize + dx) as usize..];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * *s;
                            }
                        }
                    }
                }
            }
        });
    out.ensure_finite("conv2d")
}

/// Gradients of [`conv2d`]. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    need_input: bool,
) -> (Option<Tensor4>, Tensor4, Tensor4) {
    let [n, ci, h, w] = input.dims();
    let co = weight.dims()[0];
    let plane = h * w;
    let x = input.data();
    let k = weight.data();
    let g = grad_out.data();

    let mut d_weight = Tensor4::zeros(weight.dims());
    d_weight
        .data_mut()
        .par_chunks_mut(ci * 9)
        .enumerate()
        .for_each(|(o, dw)| {
            for bi in 0..n {
                let gp = &g[(bi * co + o) * plane..][..plane];
                for i in 0..ci {
                    let src = &x[(bi * ci + i) * plane..][..plane];
                    for ky in 0..KERNEL {
                        let dy = ky as isize - 1;
                        let (y0, y1) = tap_range(dy, h);
                        for kx in 0..KERNEL {
                            let dx = kx as isize - 1;
                            let (x0, x1) = tap_range(dx, w);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gp[y * w + x0..y * w + x1];
                                let srow = &src[sy * w..][(x0 as isize + dx) as usize..];
                                for (a, b) in grow.iter().zip(srow) {
                                    acc += a * b;
                                }
                            }
                            dw[i * 9 + ky * KERNEL + kx] += acc;
                        }
                    }
                }
            }
        });

    let mut d_bias = Tensor4::zeros([co, 1, 1, 1]);
    for (o, db) in d_bias.data_mut().iter_mut().enumerate() {
        for bi in 0..n {
            *db += g[(bi * co + o) * plane..][..plane].iter().sum::<f64>();
        }
    }

    let d_input = need_input.then(|| {
        let mut d_input = Tensor4::zeros(input.dims());
        d_input
            .data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| {
                let (bi, i) = (idx / ci, idx % ci);
                for o in 0..co {
                    let gp = &g[(bi * co + o) * plane..][..plane];
                    let taps = &k[(o * ci + i) * 9..][..9];
                    for ky in 0..KERNEL {
                        let dy = ky as isize - 1;
                        let (y0, y1) = tap_range(dy, h);
                        for kx in 0..KERNEL {
                            let dx = kx as isize - 1;
                            let (x0, x1) = tap_range(dx, w);
                            let wv = taps[ky * KERNEL + kx];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gp[y * w + x0..y * w + x1];
                                let start = sy * w + (x0 as isize + dx) as usize;
                                let drow = &mut dst[start..start + grow.len()];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            });
        d_input
    });

    (d_input, d_weight, d_bias)
}

/// 2x2 max pooling with stride 2. Also returns, for every output element,
/// the flat input index that won the window (first maximum in scan order).
pub fn maxpool2x2(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [n, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.data_mut()[o] = x[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    Ok((out.ensure_finite("maxpool2x2")?, argmax))
}

pub fn maxpool2x2_backward(
    grad_out: &Tensor4,
    argmax: &[usize],
    input_dims: [usize; 4],
) -> Tensor4 {
    let mut d_input = Tensor4::zeros(input_dims);
    let d = d_input.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        d[idx] += g;
    }
    d_input
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Subgradient at zero is zero.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut d = grad_out.clone();
    for (g, &x) in d.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

fn check_linear(input: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<(usize, usize)> {
    let [out_w, in_w, kh, kw] = weight.dims();
    if kh != 1 || kw != 1 {
        return Err(Error::shape(format!(
            "fully connected weight must have unit kernel, got {kh}x{kw}"
        )));
    }
    if input.item_len() != in_w {
        return Err(Error::shape(format!(
            "flattened input length {} does not match weight fan-in {in_w}",
            input.item_len()
        )));
    }
    if bias.len() != out_w {
        return Err(Error::shape(format!(
            "linear bias has {} entries for {out_w} outputs",
            bias.len()
        )));
    }
    Ok((in_w, out_w))
}

/// Fully connected layer on the `(c, h, w)`-flattened input. Output dims are
/// `(n, out, 1, 1)`.
pub fn linear(input: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let (in_w, out_w) = check_linear(input, weight, bias)?;
    let n = input.batch();
    let mut out = Tensor4::zeros([n, out_w, 1, 1]);
    let x = input.data();
    let k = weight.data();
    let b = bias.data();
    out.data_mut()
        .par_chunks_mut(out_w)
        .enumerate()
        .for_each(|(bi, row)| {
            let xr = &x[bi * in_w..][..in_w];
            for (o, dst) in row.iter_mut().enumerate() {
                let wr = &k[o * in_w..][..in_w];
                let mut acc = b[o];
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                *dst = acc;
            }
        });
    out.ensure_finite("linear")
}

pub fn linear_backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    need_input: bool,
) -> (Option<Tensor4>, Tensor4, Tensor4) {
    let n = input.batch();
    let [out_w, in_w, _, _] = weight.dims();
    let x = input.data();
    let k = weight.data();
    let g = grad_out.data();

    let mut d_weight = Tensor4::zeros(weight.dims());
    d_weight
        .data_mut()
        .par_chunks_mut(in_w)
        .enumerate()
        .for_each(|(o, dw)| {
            for bi in 0..n {
                let gv = g[bi * out_w + o];
                let xr = &x[bi * in_w..][..in_w];
                for (d, a) in dw.iter_mut().zip(xr) {
                    *d += gv * a;
                }
            }
        });

    let mut d_bias = Tensor4::zeros([out_w, 1, 1, 1]);
    for (o, db) in d_bias.data_mut().iter_mut().enumerate() {
        for bi in 0..n {
            *db += g[bi * out_w + o];
        }
    }

    let d_input = need_input.then(|| {
        let mut d_input = Tensor4::zeros(input.dims());
        d_input
            .data_mut()
            .par_chunks_mut(in_w)
            .enumerate()
            .for_each(|(bi, dst)| {
                for o in 0..out_w {
                    let gv = g[bi * out_w + o];
                    let wr = &k[o * in_w..][..in_w];
                    for (d, c) in dst.iter_mut().zip(wr) {
                        *d += gv * c;
                    }
                }
            });
        d_input
    });

    (d_input, d_weight, d_bias)
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy of `logits` (viewed as `(batch, classes)`) against
/// class indices. Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, targets: &[usize]) -> Result<(f64, Tensor4)> {
    let n = logits.batch();
    let classes = logits.item_len();
    if targets.len() != n {
        return Err(Error::shape(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    if let Some(&target) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::TargetOutOfRange { target, classes });
    }
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0;
    let scale = 1.0 / n as f64;
    for (bi, &t) in targets.iter().enumerate() {
        let logp = log_softmax(logits.row(bi));
        loss -= logp[t];
        let g = &mut grad.data_mut()[bi * classes..][..classes];
        for (gv, lp) in g.iter_mut().zip(&logp) {
            *gv = lp.exp() * scale;
        }
        g[t] -= scale;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, grad.ensure_finite("softmax_cross_entropy")?))
}
