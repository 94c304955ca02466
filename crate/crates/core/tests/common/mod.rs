//! Independent oracles shared by the integration tests. Everything here is
//! written as plain scalar loops, deliberately not calling the library's
//! convolution or fusion code paths.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spconv::tensor::{Tensor4, Weights4};

pub fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn rand_weights(rng: &mut ChaCha8Rng, m: usize, cpg: usize, k: usize) -> Weights4 {
    let data = (0..m * cpg * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Weights4::new(m, cpg, k, k, data).unwrap()
}

pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &Tensor4) -> f64 {
    a.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Dense convolution oracle: groups handled by explicit block-diagonal
/// zero-filled weights, quadruple scalar loop, no shortcuts.
pub fn dense_conv_oracle(
    x: &Tensor4,
    w: &Weights4,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor4 {
    let (n, c, h, width) = x.shape();
    let (m, cpg, k, _) = w.shape();
    assert_eq!(c / groups, cpg);
    let dense = block_diag_expand(w, groups, c);
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (width + 2 * padding - k) / stride + 1;
    let mut out = Tensor4::zeros(n, m, h_out, w_out);
    for i in 0..n {
        for o in 0..m {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for j in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let xx = (ox * stride + kx) as isize - padding as isize;
                                if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < width {
                                    acc +=
                                        x.at(i, j, y as usize, xx as usize) * dense.at(o, j, ky, kx);
                                }
                            }
                        }
                    }
                    *out.at_mut(i, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Expands grouped weights into dense weights whose cross-group blocks are
/// zero.
pub fn block_diag_expand(w: &Weights4, groups: usize, c_total: usize) -> Weights4 {
    let (m, cpg, k, _) = w.shape();
    assert_eq!(cpg * groups, c_total);
    let m_per_g = m / groups;
    let mut dense = Weights4::zeros(m, c_total, k);
    for o in 0..m {
        let g = o / m_per_g;
        for ic in 0..cpg {
            for ky in 0..k {
                for kx in 0..k {
                    *dense.at_mut(o, g * cpg + ic, ky, kx) = w.at(o, ic, ky, kx);
                }
            }
        }
    }
    dense
}

/// Slices channels [from, to) out of a tensor.
pub fn slice_channels_oracle(x: &Tensor4, from: usize, to: usize) -> Tensor4 {
    let (n, _, h, w) = x.shape();
    Tensor4::from_fn(n, to - from, h, w, |i, j, y, xx| x.at(i, from + j, y, xx))
}

/// Per-channel spatial mean by explicit double summation.
pub fn gap_oracle(u: &Tensor4) -> Vec<f64> {
    let (n, c, h, w) = u.shape();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += u.at(i, j, y, x);
                }
            }
            out[i * c + j] = acc / (h * w) as f64;
        }
    }
    out
}

/// Scalar two-way softmax with max subtraction.
pub fn two_way_softmax_oracle(s3: &[f64], s1: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let beta: Vec<f64> = s3
        .iter()
        .zip(s1.iter())
        .map(|(&a, &b)| {
            let m = a.max(b);
            let e3 = (a - m).exp();
            let e1 = (b - m).exp();
            e3 / (e3 + e1)
        })
        .collect();
    let gamma = beta.iter().map(|b| 1.0 - b).collect();
    (beta, gamma)
}

/// Channel-wise convex combination by scalar loops.
pub fn fuse_oracle(u3: &Tensor4, u1: &Tensor4, beta: &[f64], gamma: &[f64]) -> Tensor4 {
    let (n, c, h, w) = u3.shape();
    Tensor4::from_fn(n, c, h, w, |i, j, y, x| {
        beta[i * c + j] * u3.at(i, j, y, x) + gamma[i * c + j] * u1.at(i, j, y, x)
    })
}

/// Central finite difference gradient of `f` with respect to one coordinate
/// of a parameter vector accessed through `get`/`set`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, at: f64, eps: f64) -> f64 {
    (f(at + eps) - f(at - eps)) / (2.0 * eps)
}

pub fn relative_error(numerical: f64, analytical: f64) -> f64 {
    (numerical - analytical).abs() / (numerical.abs() + analytical.abs()).max(1e-8)
}
