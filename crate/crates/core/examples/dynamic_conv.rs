//! One dynamic convolution layer: per-instance kernels from asymmetric
//! templates weighted by the meta-adjuster.
//!
//! cargo run --release --example dynamic_conv

use ddg::dynamic::{DynamicConvLayer, KernelTemplateSet, MetaAdjuster, TemplateShape};
use ddg::ops::conv2d_forward;
use ddg::Rng;

fn main() -> ddg::Result<()> {
    let mut rng = Rng::new(7);
    let (cin, cout, k) = (4, 6, 3);

    let mut templates = KernelTemplateSet::asymmetric(cin, cout, k)?;
    for t in &mut templates.templates {
        t.value = rng.normal_tensor(t.value.shape(), 0.1);
    }
    let adjuster = MetaAdjuster::new(cin, 2, templates.len(), &mut rng);
    let kernel = rng.normal_tensor(&[cout, cin, k, k], 0.3);
    let layer = DynamicConvLayer::new(kernel, templates, adjuster, 1, 1)?;

    let x = rng.normal_tensor::<f64>(&[3, cin, 8, 8], 1.0);
    let (y, cache) = layer.forward(&x, &x)?;
    println!("output shape {:?}, {} parameters", y.shape(), layer.param_count());

    println!("coefficients over templates {:?}", TemplateShape::ASYMMETRIC);
    for row in cache.coefficients().data().chunks(4) {
        let fmt: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}] sum {:.6}", fmt.join(", "), row.iter().sum::<f64>());
    }

    let fixed = conv2d_forward(&x, &layer.static_kernel.value, 1, 1)?;
    let shift = y.max_abs_diff(&fixed)?;
    println!("largest change relative to the static kernel alone: {shift:.4}");
    Ok(())
}
