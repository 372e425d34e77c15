//! Every template variant with and without cross-domain mixing on one
//! split, written as a CSV table.
//!
//! cargo run --release --example ablation [epochs]

use ddg::config::ExperimentConfig;
use ddg::network::{NetworkSpec, Variant};
use ddg::train::ablation_suite;

fn main() -> ddg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let mut config = ExperimentConfig::default();
    config.dataset.image_size = 16;
    config.dataset.samples_per_class = 20;
    config.training.epochs = epochs;
    config.seeds = vec![0];

    let table = ablation_suite(&config)?;
    print!("{}", table.to_csv());
    println!();
    print!("{}", table.summary_text()?);

    println!("\nparameter counts at ResNet-50 widths, 1000 classes:");
    for v in Variant::ALL {
        println!("  {v:>14}: {}", NetworkSpec::resnet50(v, 1000).param_count());
    }
    Ok(())
}
