//! Train a dynamic toy network briefly, then average the absolute weight
//! of its instance kernels at each of the k x k positions.
//!
//! cargo run --release --example kernel_magnitude [epochs] [out.pgm]

use ddg::analysis::{export_kernel_magnitude, to_pgm};
use ddg::config::ExperimentConfig;
use ddg::data::{generate_dataset, stack_samples};
use ddg::train::{run_seed, Split};

fn main() -> ddg::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let out = args.next().unwrap_or_else(|| "kmm.pgm".into());

    let mut config = ExperimentConfig::default();
    config.dataset.image_size = 16;
    config.dataset.samples_per_class = 40;
    config.training.epochs = epochs;
    let split = Split::new(&generate_dataset(&config.dataset)?, config.target_domain, 0.0)?;
    let (record, mut state) = run_seed(&config, &split, 0, None, |_| Ok(()))?;
    println!("target accuracy after {epochs} epochs: {:.3}", record.target_accuracy);

    let (probe, _) = stack_samples(&split.target.iter().take(32).collect::<Vec<_>>())?;
    let kmm = export_kernel_magnitude(&mut state.network, Some(&probe))?;
    for row in kmm.aggregate.chunks(kmm.k) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}", cells.join("  "));
    }
    let (cross, corners) = kmm.skeleton_vs_corners();
    println!("center row/column mean {cross:.3}, corner mean {corners:.3}");

    std::fs::write(&out, to_pgm(&kmm.aggregate, kmm.k, 32)).map_err(|e| ddg::Error::Io {
        path: out.clone().into(),
        source: e,
    })?;
    println!("wrote {out}");
    Ok(())
}
