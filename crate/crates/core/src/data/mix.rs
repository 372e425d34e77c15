use serde::{Deserialize, Serialize};

use super::DomainSample;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Mixed samples take the place of the originals.
    Replace,
    /// Mixed samples are appended to the originals.
    Supplement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainMixConfig {
    /// Chance that a batch element is mixed; 0 disables mixing.
    pub probability: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub mode: MixMode,
}

impl Default for DomainMixConfig {
    fn default() -> Self {
        DomainMixConfig {
            probability: 1.0,
            beta_a: 1.0,
            beta_b: 1.0,
            mode: MixMode::Replace,
        }
    }
}

impl DomainMixConfig {
    pub fn disabled() -> Self {
        DomainMixConfig {
            probability: 0.0,
            ..Default::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.probability > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("mix probability {} outside [0, 1]", self.probability)));
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::Config(format!(
                "Beta parameters must be positive, got ({}, {})",
                self.beta_a, self.beta_b
            )));
        }
        Ok(())
    }
}

/// Convex combination `alpha * i + (1 - alpha) * j` of two samples from
/// different source domains.
pub fn domain_mix_with_alpha(i: &DomainSample, j: &DomainSample, alpha: f64) -> Result<DomainSample> {
    match (i.domain, j.domain) {
        (Some(a), Some(b)) if a != b => {}
        (Some(a), Some(_)) => {
            return Err(Error::Validation(format!("cannot mix two samples of domain {a}")));
        }
        _ => return Err(Error::Validation("cannot mix an already mixed sample".into())),
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("mixing weight {alpha} outside [0, 1]")));
    }
    let mut image = i.image.clone();
    image.same_shape(&j.image, "domain_mix")?;
    let mut label = i.label.clone();
    label.same_shape(&j.label, "domain_mix")?;
    let a = alpha as f32;
    let b = (1.0 - alpha) as f32;
    for (x, &y) in image.data_mut().iter_mut().zip(j.image.data()) {
        // Clamp away f32 rounding so the result never leaves [min, max].
        *x = (a * *x + b * y).clamp(x.min(y), x.max(y));
    }
    for (x, &y) in label.data_mut().iter_mut().zip(j.label.data()) {
        *x = a * *x + b * y;
    }
    Ok(DomainSample {
        image,
        label,
        domain: None,
    })
}

/// Mix two samples with a fresh `alpha ~ Beta(beta_a, beta_b)`.
pub fn domain_mix(
    i: &DomainSample,
    j: &DomainSample,
    rng: &mut Rng,
    beta_a: f64,
    beta_b: f64,
) -> Result<DomainSample> {
    let alpha = rng.beta(beta_a, beta_b)?;
    domain_mix_with_alpha(i, j, alpha)
}

/// Apply DomainMix across a batch: each element is, with the configured
/// probability, mixed with a uniformly chosen batch element of another
/// domain. Elements without a partner pass through unchanged.
pub fn mix_batch(batch: &[DomainSample], config: &DomainMixConfig, rng: &mut Rng) -> Result<Vec<DomainSample>> {
    config.validate()?;
    if !config.enabled() {
        return Ok(batch.to_vec());
    }
    let mut mixed = Vec::with_capacity(batch.len());
    for (idx, s) in batch.iter().enumerate() {
        let take = config.probability >= 1.0 || rng.uniform() < config.probability;
        let partners: Vec<usize> = (0..batch.len())
            .filter(|&j| j != idx && batch[j].domain.is_some() && batch[j].domain != s.domain)
            .collect();
        if !take || partners.is_empty() || s.is_mixed() {
            mixed.push(s.clone());
            continue;
        }
        let j = partners[rng.below(partners.len())];
        mixed.push(domain_mix(s, &batch[j], rng, config.beta_a, config.beta_b)?);
    }
    Ok(match config.mode {
        MixMode::Replace => mixed,
        MixMode::Supplement => {
            let mut all = batch.to_vec();
            all.extend(mixed.into_iter().filter(DomainSample::is_mixed));
            all
        }
    })
}
