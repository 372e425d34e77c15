//! Dump the meta-adjuster outputs of a trained network for every sample,
//! then summarize the average coefficients per source domain.
//!
//! cargo run --release --example coefficients [epochs]

use ddg::analysis::export_coefficients;
use ddg::config::ExperimentConfig;
use ddg::data::generate_dataset;
use ddg::train::{run_seed, Split};

fn main() -> ddg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let mut config = ExperimentConfig::default();
    config.dataset.image_size = 16;
    config.dataset.samples_per_class = 40;
    config.training.epochs = epochs;
    let data = generate_dataset(&config.dataset)?;
    let split = Split::new(&data, config.target_domain, 0.0)?;
    let (_, mut state) = run_seed(&config, &split, 0, None, |_| Ok(()))?;

    let blocks = state.network.dynamic_blocks();
    let last = *blocks.last().expect("dynamic network");
    let dump = export_coefficients(&mut state.network, &data, &[blocks[0], last], 100)?;
    std::fs::write("coefficients.csv", dump.to_csv()).map_err(|e| ddg::Error::Io {
        path: "coefficients.csv".into(),
        source: e,
    })?;
    println!("{} rows written to coefficients.csv", dump.rows.len());

    for block in [blocks[0], last] {
        println!("block {block}:");
        for d in 0..config.dataset.num_domains as i64 {
            let rows: Vec<_> = dump.rows.iter().filter(|r| r.block == block && r.domain == d).collect();
            let mut mean = [0.0; 4];
            for r in &rows {
                for (m, l) in mean.iter_mut().zip(&r.lambdas) {
                    *m += l / rows.len() as f64;
                }
            }
            println!("  domain {d}: {mean:.3?}");
        }
    }
    Ok(())
}
