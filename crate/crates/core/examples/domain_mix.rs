//! Render the four synthetic domains and blend samples across domains.
//!
//! cargo run --release --example domain_mix

use ddg::data::{domain_mix, domain_mix_with_alpha, generate_dataset, mix_batch, DomainMixConfig, SyntheticDatasetConfig};
use ddg::Rng;

fn main() -> ddg::Result<()> {
    let config = SyntheticDatasetConfig {
        samples_per_class: 4,
        ..Default::default()
    };
    let data = generate_dataset(&config)?;
    println!("{} samples, {} domains x {} classes", data.len(), config.num_domains, config.num_classes);
    for (d, style) in config.styles.iter().enumerate() {
        let first = data.iter().find(|s| s.domain == Some(d)).unwrap();
        println!("domain {d}: {style:?}, mean intensity {:.3}", first.image.sum() / first.image.len() as f32);
    }

    let (a, b) = (&data[0], &data.last().unwrap());
    let half = domain_mix_with_alpha(a, b, 0.5)?;
    println!("class {} + class {} at 0.5 -> label {:?}", a.class(), b.class(), half.label.data());

    let mut rng = Rng::new(3);
    let drawn = domain_mix(a, b, &mut rng, 1.0, 1.0)?;
    println!("Beta(1,1) draw -> label {:?}, domain code {}", drawn.label.data(), drawn.domain_code());

    if domain_mix_with_alpha(a, &data[1], 0.5).is_err() {
        println!("same-domain pairs are rejected");
    }

    let batch: Vec<_> = (0..3).map(|d| data[d * 20].clone()).collect();
    let mixed = mix_batch(&batch, &DomainMixConfig::default(), &mut rng)?;
    println!("mixed batch of {}: all mixed = {}", mixed.len(), mixed.iter().all(|s| s.is_mixed()));
    Ok(())
}
