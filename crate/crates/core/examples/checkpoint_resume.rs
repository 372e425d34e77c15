//! Interrupt training halfway, reload the checkpoint, and check the
//! resumed run lands on exactly the same weights.
//!
//! cargo run --release --example checkpoint_resume

use ddg::config::ExperimentConfig;
use ddg::data::generate_dataset;
use ddg::train::{encode_checkpoint, load_checkpoint, run_seed, save_checkpoint, Split};

fn main() -> ddg::Result<()> {
    let mut config = ExperimentConfig::default();
    config.dataset.image_size = 12;
    config.dataset.samples_per_class = 10;
    config.training.epochs = 4;
    let split = Split::new(&generate_dataset(&config.dataset)?, config.target_domain, 0.0)?;

    let dir = std::env::temp_dir().join("ddg-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| ddg::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("epoch2.ddgt");

    let (straight, finished) = run_seed(&config, &split, 1, None, |s| {
        if s.epochs_done() == 2 {
            save_checkpoint(&path, s)?;
        }
        Ok(())
    })?;

    let halfway = load_checkpoint(&path)?;
    println!("loaded {} after {} epochs", path.display(), halfway.epochs_done());
    let (resumed, resumed_state) = run_seed(&config, &split, 1, Some(halfway), |_| Ok(()))?;

    println!("uninterrupted losses {:?}", straight.losses());
    println!("resumed losses       {:?}", resumed.losses());
    let same = encode_checkpoint(&finished)? == encode_checkpoint(&resumed_state)?;
    println!("final checkpoints byte-identical: {same}");
    Ok(())
}
