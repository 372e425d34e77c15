//! Experiment configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DomainMixConfig, SyntheticDatasetConfig};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, StemSpec, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Output width of each stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Stage width divided by bottleneck width.
    pub expansion: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub kernel_size: usize,
    pub reduction: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::Asymmetric,
            widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            expansion: 4,
            stem_kernel: 3,
            stem_stride: 1,
            kernel_size: 3,
            reduction: 4,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, num_classes: usize) -> Result<NetworkSpec> {
        let stem = StemSpec {
            in_channels: 3,
            out_channels: *self
                .widths
                .first()
                .ok_or_else(|| Error::Config("network.widths is empty".into()))?,
            kernel: self.stem_kernel,
            stride: self.stem_stride,
        };
        let mut spec = NetworkSpec::bottleneck(
            stem,
            &self.widths,
            &self.blocks_per_stage,
            self.expansion,
            num_classes,
            self.variant,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        spec.kernel_size = self.kernel_size;
        spec.reduction = self.reduction;
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of each source (domain, class) cell held back for
    /// validation on seen domains.
    pub validation_fraction: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 48,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            validation_fraction: 0.0,
            eval_batch_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub target_domain: usize,
    pub seeds: Vec<u64>,
    pub dataset: SyntheticDatasetConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub domainmix: DomainMixConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            target_domain: 3,
            seeds: vec![0, 1, 2],
            dataset: SyntheticDatasetConfig::default(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            domainmix: DomainMixConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.domainmix.validate()?;
        self.spec()?;
        if self.target_domain >= self.dataset.num_domains {
            return Err(Error::Config(format!(
                "target domain {} out of range for {} domains",
                self.target_domain, self.dataset.num_domains
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        let t = &self.training;
        let sources = self.dataset.num_domains - 1;
        if t.batch_size == 0 || !t.batch_size.is_multiple_of(sources) {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by the {sources} source domains",
                t.batch_size
            )));
        }
        if t.base_lr.is_nan() || t.base_lr <= 0.0 || !(0.0..1.0).contains(&t.momentum) || t.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) || t.eval_batch_size == 0 {
            return Err(Error::Config("invalid validation settings".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        self.network.spec(self.dataset.num_classes)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.network.variant = variant;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 over the crate version and the serialized config.
    pub fn hash(&self) -> Result<String> {
        let text = format!("{}\n{}", env!("CARGO_PKG_VERSION"), self.to_toml()?);
        Ok(crate::io::sha256_hex(text.as_bytes()))
    }
}
