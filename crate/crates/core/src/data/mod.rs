//! Synthetic multi-domain images, DomainMix and domain-balanced batching.

mod mix;
mod sampler;
mod synth;

pub use mix::{domain_mix, domain_mix_with_alpha, mix_batch, DomainMixConfig, MixMode};
pub use sampler::domain_balanced_batches;
pub use synth::{
    apply_style, generate_dataset, render_shape, DomainStyle, Latent, ShapeKind, SyntheticDatasetConfig,
};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled image. `domain` is `None` for DomainMix outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[K]`, nonnegative, sums to one.
    pub label: Tensor<f32>,
    pub domain: Option<usize>,
}

/// Integer code used for mixed samples in exported files.
pub const MIXED: i64 = -1;

impl DomainSample {
    pub fn new(image: Tensor<f32>, label: Tensor<f32>, domain: Option<usize>) -> Result<Self> {
        if image.rank() != 3 {
            return Err(Error::shape("DomainSample", "image rank", format!("{:?}", image.shape())));
        }
        if label.rank() != 1 || label.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!("invalid label {:?}", label.data())));
        }
        let s: f64 = label.data().iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("label sums to {s}, expected 1")));
        }
        Ok(DomainSample { image, label, domain })
    }

    pub fn is_mixed(&self) -> bool {
        self.domain.is_none()
    }

    pub fn domain_code(&self) -> i64 {
        self.domain.map_or(MIXED, |d| d as i64)
    }

    /// Class with the largest label mass (lowest index on ties).
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.label.data().iter().enumerate() {
            if v > self.label.data()[best] {
                best = i;
            }
        }
        best
    }

    /// SHA-256 of image and label bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.image.data().iter().chain(self.label.data()) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

pub fn one_hot(class: usize, k: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[k]);
    t.data_mut()[class] = 1.0;
    t
}

/// Stack samples into `([B,3,H,W], [B,K])`.
pub fn stack_samples(samples: &[&DomainSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot stack an empty batch".into()));
    }
    let lead = |t: &Tensor<f32>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let images = samples.iter().map(|s| lead(&s.image)).collect::<Result<Vec<_>>>()?;
    let labels = samples.iter().map(|s| lead(&s.label)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&labels)?))
}

/// Split a dataset into samples from `target` and everything else.
pub fn split_by_domain(samples: &[DomainSample], target: usize) -> (Vec<DomainSample>, Vec<DomainSample>) {
    samples.iter().cloned().partition(|s| s.domain != Some(target))
}
