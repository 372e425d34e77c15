use std::fmt::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub steps: usize,
}

/// Result of training and evaluating one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_toml: String,
    pub config_hash: String,
    pub split_hash: String,
    pub variant: String,
    pub domainmix: bool,
    pub target_domain: usize,
    pub seed: u64,
    pub params: usize,
    pub epochs: Vec<EpochRecord>,
    pub target_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Line-oriented `key=value` blocks: one per epoch, then a summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "record=epoch\nseed={}\nepoch={}\nlr={:e}\nloss={:e}\nsteps={}\n",
                self.seed, e.epoch, e.lr, e.loss, e.steps
            );
        }
        let _ = writeln!(s, "record=summary");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "domainmix={}", self.domainmix);
        let _ = writeln!(s, "target_domain={}", self.target_domain);
        let _ = writeln!(s, "params={}", self.params);
        let _ = writeln!(s, "target_accuracy={}", self.target_accuracy);
        if let Some(v) = self.validation_accuracy {
            let _ = writeln!(s, "validation_accuracy={v}");
        }
        let _ = writeln!(s, "wall_time_secs={:.3}", self.wall_time_secs);
        let _ = writeln!(s, "pretrained=false");
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "split_hash={}", self.split_hash);
        let _ = writeln!(s, "config={}", self.config_toml.escape_default());
        s
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Validation("cannot aggregate zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// All seeds of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds.
    pub std_accuracy: f64,
}

impl ExperimentReport {
    pub fn new(records: Vec<RunRecord>) -> Result<Self> {
        let acc: Vec<f64> = records.iter().map(|r| r.target_accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc)?;
        Ok(ExperimentReport {
            records,
            mean_accuracy,
            std_accuracy,
        })
    }

    pub fn summary_text(&self) -> String {
        let r = &self.records[0];
        format!(
            "record=aggregate\nvariant={}\ndomainmix={}\ntarget_domain={}\nseeds={}\nmean_accuracy={}\nstd_accuracy={}\nstd_kind=sample\n",
            r.variant,
            r.domainmix,
            r.target_domain,
            self.records.len(),
            self.mean_accuracy,
            self.std_accuracy
        )
    }
}
