//! Independent reference implementations and helpers shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use planting::{ArchitectureSpec, ChannelConfig, Param, PlantableNetwork, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let len = dims.iter().product();
    Tensor4::from_vec(dims, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-padded 3x3 convolution written as a direct loop over every output
/// element and every tap.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
    let [n, ci, h, wd] = x.dims();
    let co = w.dims()[0];
    let mut out = Tensor4::zeros([n, co, h, wd]);
    for bi in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(bi, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(bi, o, y, xx, acc);
                }
            }
        }
    }
    out
}

pub fn naive_maxpool(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, h / 2, w / 2]);
    for bi in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(bi, ch, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.set(bi, ch, y, xx, m);
                }
            }
        }
    }
    out
}

pub fn naive_linear(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
    let n = x.batch();
    let [o, i, _, _] = w.dims();
    let mut out = Tensor4::zeros([n, o, 1, 1]);
    for bi in 0..n {
        for r in 0..o {
            let mut acc = b.data()[r];
            for c in 0..i {
                acc += w.data()[r * i + c] * x.data()[bi * i + c];
            }
            out.set(bi, r, 0, 0, acc);
        }
    }
    out
}

/// Cross-entropy through explicit exponentials, without max subtraction.
pub fn naive_cross_entropy(logits: &Tensor4, targets: &[usize]) -> f64 {
    let k = logits.item_len();
    let mut total = 0.0;
    for (bi, &t) in targets.iter().enumerate() {
        let row = &logits.data()[bi * k..][..k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[t].exp() / z).ln();
    }
    total / targets.len() as f64
}

pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Copy of `net` with one scalar parameter shifted by `delta`.
pub fn perturbed(
    net: &PlantableNetwork,
    tensor: usize,
    index: usize,
    delta: f64,
) -> PlantableNetwork {
    let params = net
        .params()
        .enumerate()
        .map(|(t, p)| {
            let mut v = p.value().clone();
            if t == tensor {
                v.data_mut()[index] += delta;
            }
            Param::from_parts(v, p.frozen().to_vec()).unwrap()
        })
        .collect();
    PlantableNetwork::from_parts(*net.spec(), *net.channels(), params).unwrap()
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare in absolute terms.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter of `net`.
pub fn gradient_check(
    net: &PlantableNetwork,
    loss: impl Fn(&PlantableNetwork) -> f64 + Sync,
    analytic: &[Tensor4],
    step: f64,
) -> (f64, usize) {
    use rayon::prelude::*;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (t, g) in analytic.iter().enumerate() {
        let errs: Vec<f64> = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let up = loss(&perturbed(net, t, i, step));
                let down = loss(&perturbed(net, t, i, -step));
                rel_err(g.data()[i], (up - down) / (2.0 * step))
            })
            .collect();
        checked += errs.len();
        worst = errs.into_iter().fold(worst, f64::max);
    }
    (worst, checked)
}

pub fn cifar_net(width: usize, seed: u64) -> PlantableNetwork {
    PlantableNetwork::build(
        ArchitectureSpec::cifar(),
        ChannelConfig::uniform(width, 10),
        seed,
    )
    .unwrap()
}
