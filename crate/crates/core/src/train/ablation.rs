use std::fmt::Write;

use super::{mean_std, run_experiment_on, Split};
use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, DomainMixConfig};
use crate::error::{Error, Result};
use crate::network::Variant;

pub const ABLATION_CSV_HEADER: &str = "variant,domainmix,target_domain,seed,accuracy,params";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub domainmix: bool,
    pub target_domain: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub params: usize,
}

/// `(variant, domainmix, mean accuracy, sample std, params)`.
pub type SummaryRow = (Variant, bool, f64, f64, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub split_hash: String,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant, r.domainmix, r.target_domain, r.seed, r.accuracy, r.params
            );
        }
        s
    }

    /// One entry per configuration, in run order.
    pub fn summary(&self) -> Result<Vec<SummaryRow>> {
        let mut keys: Vec<(Variant, bool)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.variant, r.domainmix)) {
                keys.push((r.variant, r.domainmix));
            }
        }
        keys.into_iter()
            .map(|(v, m)| {
                let sel: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v && r.domainmix == m).collect();
                let acc: Vec<f64> = sel.iter().map(|r| r.accuracy).collect();
                let (mean, std) = mean_std(&acc)?;
                Ok((v, m, mean, std, sel[0].params))
            })
            .collect()
    }

    pub fn summary_text(&self) -> Result<String> {
        let mut s = String::from("variant,domainmix,mean_accuracy,std_accuracy,params\n");
        for (v, m, mean, std, p) in self.summary()? {
            let _ = writeln!(s, "{v},{m},{mean},{std},{p}");
        }
        Ok(s)
    }
}

/// Every variant with DomainMix on (base settings) and off, all seeds,
/// on one shared split.
pub fn ablation_suite(base: &ExperimentConfig) -> Result<AblationTable> {
    base.validate()?;
    let dataset = generate_dataset(&base.dataset)?;
    let split = Split::new(&dataset, base.target_domain, base.training.validation_fraction)?;
    let on = if base.domainmix.enabled() {
        base.domainmix
    } else {
        DomainMixConfig::default()
    };
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for mix in [on, DomainMixConfig::disabled()] {
            let mut config = base.with_variant(variant);
            config.domainmix = mix;
            let report = run_experiment_on(&config, &split)?;
            for r in report.records {
                if r.split_hash != split.hash() {
                    return Err(Error::Validation("runs of one suite saw different splits".into()));
                }
                rows.push(AblationRow {
                    variant,
                    domainmix: r.domainmix,
                    target_domain: r.target_domain,
                    seed: r.seed,
                    accuracy: r.target_accuracy,
                    params: r.params,
                });
            }
        }
    }
    Ok(AblationTable {
        rows,
        split_hash: split.hash(),
    })
}
