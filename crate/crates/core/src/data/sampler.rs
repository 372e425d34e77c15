use std::collections::BTreeMap;

use super::DomainSample;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Index batches in which every source domain contributes exactly
/// `batch_size / M` samples. Domains are shuffled independently and the
/// epoch ends when the smallest domain runs out.
pub fn domain_balanced_batches(dataset: &[DomainSample], batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        let d = s
            .domain
            .ok_or_else(|| Error::Validation(format!("sample {i} is mixed; only source samples can be batched")))?;
        by_domain.entry(d).or_default().push(i);
    }
    let m = by_domain.len();
    if m == 0 {
        return Err(Error::Validation("no samples to batch".into()));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "batch size {batch_size} is not divisible by the {m} source domains"
        )));
    }
    let per = batch_size / m;
    for idx in by_domain.values_mut() {
        rng.shuffle(idx);
    }
    let batches = by_domain.values().map(|v| v.len() / per).min().unwrap_or(0);
    let mut out = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut batch: Vec<usize> = by_domain
            .values()
            .flat_map(|idx| idx[b * per..(b + 1) * per].iter().copied())
            .collect();
        rng.shuffle(&mut batch);
        out.push(batch);
    }
    Ok(out)
}
