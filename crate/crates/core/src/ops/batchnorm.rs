//! Per-channel batch normalization over `[B,C,H,W]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance. Fresh stats are mean 0, var 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub fn batchnorm2d_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let op = "batchnorm2d_forward";
    let [b, c, h, w] = input.dims4(op)?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running mean", &stats.mean), ("running var", &stats.var)] {
        if t.shape() != [c] {
            return Err(Error::shape(op, format!("{name} axis 0 vs input axis 1"), format!("{:?} vs {c}", t.shape())));
        }
    }
    let hw = h * w;
    let n = b * hw;
    let eps = T::from_f64(BN_EPS);
    let x = input.data();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..b).map(move |bi| (bi * c + ch) * hw);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for at in planes() {
                    sum += x[at..at + hw].iter().copied().sum::<T>();
                }
                let mean = sum / T::from_f64(n as f64);
                let mut sq = T::zero();
                for at in planes() {
                    sq += x[at..at + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / T::from_f64(n as f64);
                let m = T::from_f64(stats.momentum);
                let unbiased = if n > 1 { sq / T::from_f64((n - 1) as f64) } else { var };
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean;
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
                (mean, var)
            }
            Mode::Eval => (stats.mean[ch], stats.var[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, bt) = (gamma[ch], beta[ch]);
        for at in planes() {
            for i in at..at + hw {
                let xh = (x[i] - mean) * is;
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    out.ensure_finite(|| op.to_string())?;
    Ok((out, BatchNormCache { normalized, inv_std, mode }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let op = "batchnorm2d_backward";
    grad_out.same_shape(&cache.normalized, op)?;
    let [b, c, h, w] = grad_out.dims4(op)?;
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let go = grad_out.data();
    let xh = cache.normalized.data();
    let mut gi = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ch in 0..c {
        let planes = || (0..b).map(move |bi| (bi * c + ch) * hw);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for at in planes() {
            for i in at..at + hw {
                sum_g += go[i];
                sum_gx += go[i] * xh[i];
            }
        }
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        let scale = gamma[ch] * cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                let mean_g = sum_g / n;
                let mean_gx = sum_gx / n;
                for at in planes() {
                    for i in at..at + hw {
                        gi[i] = scale * (go[i] - mean_g - xh[i] * mean_gx);
                    }
                }
            }
            Mode::Eval => {
                for at in planes() {
                    for i in at..at + hw {
                        gi[i] = scale * go[i];
                    }
                }
            }
        }
    }
    Ok((gi, gg, gb))
}
