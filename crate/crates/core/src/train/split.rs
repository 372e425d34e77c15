use std::collections::{BTreeMap, HashSet};

use sha2::{Digest, Sha256};

use crate::data::DomainSample;
use crate::error::{Error, Result};

/// Leave-one-domain-out partition of a dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub target_domain: usize,
    pub train: Vec<DomainSample>,
    /// Held-in samples from the source domains.
    pub validation: Vec<DomainSample>,
    /// Every sample of the held-out domain.
    pub target: Vec<DomainSample>,
}

impl Split {
    /// Put the target domain aside and hold back the last
    /// `validation_fraction` of every source (domain, class) cell.
    pub fn new(dataset: &[DomainSample], target_domain: usize, validation_fraction: f64) -> Result<Self> {
        let mut cells: BTreeMap<(usize, usize), Vec<&DomainSample>> = BTreeMap::new();
        let mut target = Vec::new();
        for s in dataset {
            match s.domain {
                None => return Err(Error::Validation("dataset contains mixed samples".into())),
                Some(d) if d == target_domain => target.push(s.clone()),
                Some(d) => cells.entry((d, s.class())).or_default().push(s),
            }
        }
        if target.is_empty() {
            return Err(Error::Validation(format!("target domain {target_domain} has no samples")));
        }
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for cell in cells.values() {
            let held = (cell.len() as f64 * validation_fraction).ceil() as usize;
            let keep = cell.len() - held.min(cell.len());
            train.extend(cell[..keep].iter().map(|&s| s.clone()));
            validation.extend(cell[keep..].iter().map(|&s| s.clone()));
        }
        if train.is_empty() {
            return Err(Error::Validation("no training samples remain".into()));
        }
        let split = Split {
            target_domain,
            train,
            validation,
            target,
        };
        split.check_isolation()?;
        Ok(split)
    }

    /// Fails with [`Error::Leakage`] if any target sample content also
    /// appears among training samples.
    pub fn check_isolation(&self) -> Result<()> {
        if self.train.iter().any(|s| s.domain == Some(self.target_domain)) {
            return Err(Error::Validation("target domain present in training data".into()));
        }
        let seen: HashSet<[u8; 32]> = self.train.iter().map(DomainSample::content_hash).collect();
        let leaked = self.target.iter().filter(|s| seen.contains(&s.content_hash())).count();
        if leaked > 0 {
            return Err(Error::Leakage(leaked));
        }
        Ok(())
    }

    /// SHA-256 over the ordered content hashes of all three parts.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [(b't', &self.train), (b'v', &self.validation), (b'e', &self.target)] {
            h.update([tag]);
            for s in part {
                h.update(s.content_hash());
            }
        }
        hex::encode(h.finalize())
    }
}
