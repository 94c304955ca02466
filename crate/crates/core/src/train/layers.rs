//! Runtime layers of the training graph. Each layer owns its parameters and
//! gradient slots and knows how to run forward (train or eval mode) and push
//! gradients backward through its cached activations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ChannelStats, ConvGeom, ConvScratch, Tensor4, Weights4};

/// Forward execution mode. Batch norm consumes batch statistics while
/// training and frozen running statistics while evaluating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values flowing through the graph: spatial maps or flat feature vectors.
#[derive(Debug, Clone)]
pub enum Value {
    Map(Tensor4),
    Vec(ChannelStats),
}

impl Value {
    pub fn as_map(&self) -> Result<&Tensor4> {
        match self {
            Value::Map(t) => Ok(t),
            Value::Vec(_) => Err(Error::State("expected a spatial value".into())),
        }
    }

    pub fn as_vec(&self) -> Result<&ChannelStats> {
        match self {
            Value::Vec(v) => Ok(v),
            Value::Map(_) => Err(Error::State("expected a feature vector value".into())),
        }
    }

    pub fn zeros_like(&self) -> Value {
        match self {
            Value::Map(t) => {
                let (n, c, h, w) = t.shape();
                Value::Map(Tensor4::zeros(n, c, h, w))
            }
            Value::Vec(v) => {
                let (n, c) = v.shape();
                Value::Vec(ChannelStats::zeros(n, c))
            }
        }
    }

    pub fn accumulate(&mut self, other: &Value) -> Result<()> {
        match (self, other) {
            (Value::Map(a), Value::Map(b)) => {
                if a.shape() != b.shape() {
                    return Err(Error::State("gradient shape mismatch".into()));
                }
                for (x, y) in a.data_mut().iter_mut().zip(b.data().iter()) {
                    *x += y;
                }
                Ok(())
            }
            (Value::Vec(a), Value::Vec(b)) => {
                if a.shape() != b.shape() {
                    return Err(Error::State("gradient shape mismatch".into()));
                }
                for (x, y) in a.data_mut().iter_mut().zip(b.data().iter()) {
                    *x += y;
                }
                Ok(())
            }
            _ => Err(Error::State("gradient kind mismatch".into())),
        }
    }
}

fn ones(len: usize) -> Vec<f64> {
    vec![1.0; len]
}

/// Batch normalization over the channel axis with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Per-batch statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Tensor4,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: ones(channels),
            beta: vec![0.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<(Tensor4, BatchNormCache)> {
        let (n, c, h, w) = x.shape();
        if c != self.channels {
            return Err(Error::Dimension {
                axis: "batchnorm channels",
                expected: self.channels,
                got: c,
            });
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut out = Tensor4::zeros(n, c, h, w);
        let mut x_hat = Tensor4::zeros(n, c, h, w);
        let mut inv_std = vec![0.0; c];

        for j in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for i in 0..n {
                        let base = x.index(i, j, 0, 0);
                        for p in 0..plane {
                            sum += x.data()[base + p];
                        }
                    }
                    let mean = sum / count;
                    let mut var_sum = 0.0;
                    for i in 0..n {
                        let base = x.index(i, j, 0, 0);
                        for p in 0..plane {
                            let d = x.data()[base + p] - mean;
                            var_sum += d * d;
                        }
                    }
                    let var = var_sum / count;
                    self.running_mean[j] =
                        (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean;
                    self.running_var[j] =
                        (1.0 - self.momentum) * self.running_var[j] + self.momentum * var;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[j], self.running_var[j]),
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[j] = istd;
            let g = self.gamma[j];
            let b = self.beta[j];
            for i in 0..n {
                let base = x.index(i, j, 0, 0);
                for p in 0..plane {
                    let xh = (x.data()[base + p] - mean) * istd;
                    x_hat.data_mut()[base + p] = xh;
                    out.data_mut()[base + p] = g * xh + b;
                }
            }
        }
        Ok((
            out,
            BatchNormCache {
                mode,
                x_hat,
                inv_std,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad_out: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = grad_out.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut grad_x = Tensor4::zeros(n, c, h, w);

        for j in 0..c {
            let istd = cache.inv_std[j];
            let g = self.gamma[j];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                let base = grad_out.index(i, j, 0, 0);
                for p in 0..plane {
                    let dy = grad_out.data()[base + p];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.x_hat.data()[base + p];
                }
            }
            self.grad_gamma[j] += sum_dy_xhat;
            self.grad_beta[j] += sum_dy;

            match cache.mode {
                Mode::Train => {
                    for i in 0..n {
                        let base = grad_out.index(i, j, 0, 0);
                        for p in 0..plane {
                            let dy = grad_out.data()[base + p];
                            let xh = cache.x_hat.data()[base + p];
                            grad_x.data_mut()[base + p] = g * istd / count
                                * (count * dy - sum_dy - xh * sum_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    // Frozen statistics: the layer is a per-channel affine map.
                    for i in 0..n {
                        let base = grad_out.index(i, j, 0, 0);
                        for p in 0..plane {
                            grad_x.data_mut()[base + p] = grad_out.data()[base + p] * g * istd;
                        }
                    }
                }
            }
        }
        Ok(grad_x)
    }
}

/// Fully connected layer over feature vectors, with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major (out, in).
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / in_features as f64).sqrt()).expect("positive std");
        let weight = (0..in_features * out_features)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            in_features,
            out_features,
            weight,
            bias: vec![0.0; out_features],
            grad_weight: vec![0.0; in_features * out_features],
            grad_bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &ChannelStats) -> Result<ChannelStats> {
        let (n, c) = x.shape();
        if c != self.in_features {
            return Err(Error::Dimension {
                axis: "linear input features",
                expected: self.in_features,
                got: c,
            });
        }
        let mut out = ChannelStats::zeros(n, self.out_features);
        for i in 0..n {
            for o in 0..self.out_features {
                let row = &self.weight[o * c..(o + 1) * c];
                let mut acc = self.bias[o];
                for (j, &w) in row.iter().enumerate() {
                    acc += w * x.at(i, j);
                }
                *out.at_mut(i, o) = acc;
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &ChannelStats, grad_out: &ChannelStats) -> Result<ChannelStats> {
        let (n, c) = x.shape();
        let mut grad_x = ChannelStats::zeros(n, c);
        for i in 0..n {
            for o in 0..self.out_features {
                let go = grad_out.at(i, o);
                self.grad_bias[o] += go;
                let row = &mut self.grad_weight[o * c..(o + 1) * c];
                for j in 0..c {
                    row[j] += go * x.at(i, j);
                    *grad_x.at_mut(i, j) += go * self.weight[o * c + j];
                }
            }
        }
        Ok(grad_x)
    }
}

/// 2-D max pooling; padded positions never win the max.
pub fn maxpool_forward(
    x: &Tensor4,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor4, Vec<usize>)> {
    let (n, c, h, w) = x.shape();
    let geom = ConvGeom::new(stride, padding, 1);
    let h_out = geom.out_extent(h, kernel)?;
    let w_out = geom.out_extent(w, kernel)?;
    let mut out = Tensor4::zeros(n, c, h_out, w_out);
    let mut argmax = vec![0usize; n * c * h_out * w_out];
    for i in 0..n {
        for j in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let xx = (ox * stride + kx) as isize - padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let v = x.at(i, j, y as usize, xx as usize);
                            if v > best {
                                best = v;
                                best_idx = x.index(i, j, y as usize, xx as usize);
                            }
                        }
                    }
                    let o_idx = out.index(i, j, oy, ox);
                    out.data_mut()[o_idx] = best;
                    argmax[o_idx] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(x: &Tensor4, argmax: &[usize], grad_out: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.shape();
    let mut grad_x = Tensor4::zeros(n, c, h, w);
    for (o_idx, &src) in argmax.iter().enumerate() {
        grad_x.data_mut()[src] += grad_out.data()[o_idx];
    }
    grad_x
}

/// Dense/grouped convolution layer wrapper owning weights and gradients.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weights: Weights4,
    pub geom: ConvGeom,
    pub grad: Weights4,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        seed: u64,
    ) -> Self {
        let cpg = in_channels / geom.groups;
        let fan_in = cpg * kernel * kernel;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..out_channels * cpg * kernel * kernel)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            weights: Weights4::new(out_channels, cpg, kernel, kernel, data).expect("valid shape"),
            geom,
            grad: Weights4::zeros(out_channels, cpg, kernel),
        }
    }

    pub fn forward(&self, x: &Tensor4, scratch: &mut ConvScratch) -> Result<Tensor4> {
        crate::tensor::conv2d_with(x, &self.weights, &self.geom, scratch)
    }

    pub fn backward(
        &mut self,
        x: &Tensor4,
        grad_out: &Tensor4,
        scratch: &mut ConvScratch,
    ) -> Result<Tensor4> {
        let (gx, gw) =
            crate::tensor::conv2d_backward_with(x, &self.weights, &self.geom, grad_out, scratch)?;
        for (acc, g) in self.grad.data_mut().iter_mut().zip(gw.data().iter()) {
            *acc += g;
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn batchnorm_eval_is_affine_in_its_input() {
        let mut bn = BatchNorm::new(3);
        bn.running_mean = vec![0.5, -1.0, 2.0];
        bn.running_var = vec![1.5, 0.2, 4.0];
        bn.gamma = vec![2.0, 1.0, 0.5];
        bn.beta = vec![0.1, 0.0, -0.3];
        let x = Tensor4::from_fn(2, 3, 4, 4, |i, j, y, x| (i + j + y + x) as f64 * 0.1);
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        // y = a*x + b per channel with fixed a, b.
        for j in 0..3 {
            let a = bn.gamma[j] / (bn.running_var[j] + bn.eps).sqrt();
            let b = bn.beta[j] - a * bn.running_mean[j];
            for i in 0..2 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let expect = a * x.at(i, j, yy, xx) + b;
                        assert!((y.at(i, j, yy, xx) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::from_fn(4, 2, 5, 5, |_, _, _, _| rng.gen_range(-2.0..2.0));
        let mut bn = BatchNorm::new(2);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for j in 0..2 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for i in 0..4 {
                for yy in 0..5 {
                    for xx in 0..5 {
                        sum += y.at(i, j, yy, xx);
                        sq += y.at(i, j, yy, xx).powi(2);
                    }
                }
            }
            let count = 100.0;
            let mean = sum / count;
            let var = sq / count - mean * mean;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::from_fn(2, 2, 3, 3, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let proj = Tensor4::from_fn(2, 2, 3, 3, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let loss = |bn: &BatchNorm, x: &Tensor4| -> f64 {
            let mut bn = bn.clone();
            let (y, _) = bn.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(proj.data().iter()).map(|(a, b)| a * b).sum()
        };
        let mut bn = BatchNorm::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.2, -0.4];
        let base = bn.clone();
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        let gx = bn.backward(&cache, &proj).unwrap();

        let eps = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&base, &xp) - loss(&base, &xm)) / (2.0 * eps);
            let ana = gx.data()[idx];
            assert!(
                (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6) < 1e-4,
                "input grad mismatch at {idx}: {num} vs {ana}"
            );
        }
        for j in 0..2 {
            let mut bp = base.clone();
            bp.gamma[j] += eps;
            let mut bm = base.clone();
            bm.gamma[j] -= eps;
            let num = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * eps);
            assert!((num - bn.grad_gamma[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ChannelStats::new(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let proj =
            ChannelStats::new(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut lin = Linear::new(3, 4, 11);
        let base = lin.clone();
        let loss = |l: &Linear, x: &ChannelStats| -> f64 {
            let y = l.forward(x).unwrap();
            y.data().iter().zip(proj.data().iter()).map(|(a, b)| a * b).sum()
        };
        let _ = lin.forward(&x).unwrap();
        let gx = lin.backward(&x, &proj).unwrap();
        let eps = 1e-6;
        for idx in 0..lin.weight.len() {
            let mut lp = base.clone();
            lp.weight[idx] += eps;
            let mut lm = base.clone();
            lm.weight[idx] -= eps;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((num - lin.grad_weight[idx]).abs() < 1e-6);
        }
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&base, &xp) - loss(&base, &xm)) / (2.0 * eps);
            assert!((num - gx.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor4::new(
            1,
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                0.0, 1.0, 2.0, 9.0, //
                1.0, 1.0, 3.0, 1.0,
            ],
        )
        .unwrap();
        let (y, argmax) = maxpool_forward(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 1.0, 9.0]);
        let go = Tensor4::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gx = maxpool_backward(&x, &argmax, &go);
        assert_eq!(gx.at(0, 0, 1, 0), 1.0);
        assert_eq!(gx.at(0, 0, 0, 2), 2.0);
        assert_eq!(gx.at(0, 0, 2, 1), 3.0);
        assert_eq!(gx.at(0, 0, 2, 3), 4.0);
        assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }
}
