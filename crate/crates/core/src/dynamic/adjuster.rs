//! The meta-adjuster: GAP -> FC -> ReLU -> FC -> SoftMax, mapping an instance
//! embedding to coefficients on the probability simplex.

use crate::error::{Error, Result};
use crate::ops::{
    dense_backward, dense_forward, global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward,
    softmax_backward, softmax_forward,
};
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Default bottleneck reduction of the adjuster's hidden layer.
pub const DEFAULT_REDUCTION: usize = 4;

/// Hidden width for `channels` embedding channels; never below one unit.
pub fn adjuster_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Parameter count of an adjuster with `channels` inputs and `n` outputs.
pub fn adjuster_param_count(channels: usize, reduction: usize, n: usize) -> usize {
    let h = adjuster_hidden(channels, reduction);
    channels * h + h + h * n + n
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaAdjuster<T> {
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
    reduction: usize,
}

#[derive(Debug, Clone)]
pub struct AdjusterCache<T> {
    input_shape: Vec<usize>,
    pooled: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
    pub coeffs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AdjusterGrads<T> {
    pub feature_in: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> MetaAdjuster<T> {
    /// Weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn new(channels: usize, reduction: usize, n: usize, rng: &mut Rng) -> Self {
        let h = adjuster_hidden(channels, reduction);
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (h as f64).sqrt();
        MetaAdjuster {
            w1: Param::new(rng.uniform_tensor(&[channels, h], -b1, b1)),
            b1: Param::new(Tensor::zeros(&[h])),
            w2: Param::new(rng.uniform_tensor(&[h, n], -b2, b2)),
            b2: Param::new(Tensor::zeros(&[n])),
            reduction,
        }
    }

    pub fn from_tensors(
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
        reduction: usize,
    ) -> Result<Self> {
        let op = "MetaAdjuster";
        let [c, h] = w1.dims2(op)?;
        let [h2, n] = w2.dims2(op)?;
        if h2 != h || b1.shape() != [h] || b2.shape() != [n] {
            return Err(Error::shape(
                op,
                "hidden/output widths",
                format!("w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}", w1.shape(), b1.shape(), w2.shape(), b2.shape()),
            ));
        }
        if h != adjuster_hidden(c, reduction) {
            return Err(Error::Validation(format!(
                "{op}: hidden width {h} does not match {c} channels at reduction {reduction}"
            )));
        }
        Ok(MetaAdjuster {
            w1: w1.into(),
            b1: b1.into(),
            w2: w2.into(),
            b2: b2.into(),
            reduction,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.w1.value.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.b2.value.len()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn forward(&self, feature_in: &Tensor<T>) -> Result<(Tensor<T>, AdjusterCache<T>)> {
        let op = "adjuster_coefficients";
        let [_, c, _, _] = feature_in.dims4(op)?;
        if c != self.in_channels() {
            return Err(Error::shape(
                op,
                "embedding axis 1 vs adjuster W1 axis 0",
                format!("{c} vs {}", self.in_channels()),
            ));
        }
        let pooled = global_avg_pool(feature_in)?;
        let hidden_pre = dense_forward(&pooled, &self.w1.value, &self.b1.value)?;
        let hidden = relu_forward(&hidden_pre);
        let logits = dense_forward(&hidden, &self.w2.value, &self.b2.value)?;
        let coeffs = softmax_forward(&logits)?;
        Ok((
            coeffs.clone(),
            AdjusterCache {
                input_shape: feature_in.shape().to_vec(),
                pooled,
                hidden_pre,
                hidden,
                coeffs,
            },
        ))
    }

    pub fn backward(&self, grad_coeffs: &Tensor<T>, cache: &AdjusterCache<T>) -> Result<AdjusterGrads<T>> {
        let g_logits = softmax_backward(grad_coeffs, &cache.coeffs)?;
        let (g_hidden, w2, b2) = dense_backward(&g_logits, &cache.hidden, &self.w2.value)?;
        let g_pre = relu_backward(&g_hidden, &cache.hidden_pre)?;
        let (g_pooled, w1, b1) = dense_backward(&g_pre, &cache.pooled, &self.w1.value)?;
        let feature_in = global_avg_pool_backward(&g_pooled, &cache.input_shape)?;
        Ok(AdjusterGrads { feature_in, w1, b1, w2, b2 })
    }
}

/// Instance-aware coefficients `[B,N]` for a batch of embeddings `[B,C,H,W]`.
pub fn adjuster_coefficients<T: Scalar>(feature_in: &Tensor<T>, adjuster: &MetaAdjuster<T>) -> Result<Tensor<T>> {
    adjuster.forward(feature_in).map(|(c, _)| c)
}
