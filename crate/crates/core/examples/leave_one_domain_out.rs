//! Train the toy network on three domains and test on the fourth, for
//! every choice of held-out domain.
//!
//! cargo run --release --example leave_one_domain_out [epochs]

use ddg::config::ExperimentConfig;
use ddg::data::generate_dataset;
use ddg::train::{run_experiment_on, Split};

fn main() -> ddg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let mut config = ExperimentConfig::default();
    config.dataset.image_size = 16;
    config.dataset.samples_per_class = 40;
    config.training.epochs = epochs;
    config.seeds = vec![0];
    let data = generate_dataset(&config.dataset)?;

    for target in 0..config.dataset.num_domains {
        config.target_domain = target;
        let split = Split::new(&data, target, 0.0)?;
        let report = run_experiment_on(&config, &split)?;
        println!(
            "held out domain {target}: train {} samples, target accuracy {:.3} ({:.1}s)",
            split.train.len(),
            report.mean_accuracy,
            report.records[0].wall_time_secs
        );
    }
    Ok(())
}
