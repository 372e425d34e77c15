//! Compare the analytic gradients of a dynamic layer against central
//! finite differences in double precision.
//!
//! cargo run --release --example gradient_check

use ddg::dynamic::{DynamicConvLayer, KernelTemplateSet, MetaAdjuster};
use ddg::{Rng, Tensor};

fn loss(layer: &DynamicConvLayer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let (y, _) = layer.forward(x, x).expect("forward");
    y.dot(r).expect("same shape")
}

fn main() -> ddg::Result<()> {
    let mut rng = Rng::new(5);
    let mut templates = KernelTemplateSet::asymmetric(3, 4, 3)?;
    for t in &mut templates.templates {
        t.value = rng.normal_tensor(t.value.shape(), 0.5);
    }
    let adjuster = MetaAdjuster::new(3, 1, 4, &mut rng);
    let mut layer = DynamicConvLayer::new(rng.normal_tensor(&[4, 3, 3, 3], 0.5), templates, adjuster, 1, 1)?;
    let x = rng.normal_tensor::<f64>(&[2, 3, 5, 5], 1.0);

    let (y, cache) = layer.forward(&x, &x)?;
    let r = rng.normal_tensor::<f64>(y.shape(), 1.0);
    let grads = layer.backward(&r, &cache)?;
    let h = 1e-6;

    let mut worst: f64 = 0.0;
    for (n, analytic) in grads.templates.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = layer.templates.templates[n].value[i];
            layer.templates.templates[n].value[i] = orig + h;
            let up = loss(&layer, &x, &r);
            layer.templates.templates[n].value[i] = orig - h;
            let down = loss(&layer, &x, &r);
            layer.templates.templates[n].value[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1e-3));
        }
        println!("template {}: {} entries checked", n + 1, analytic.len());
    }

    let input_grad = grads.input.add(&grads.embedding)?;
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = loss(&layer, &probe, &r);
        probe[i] = x[i] - h;
        let down = loss(&layer, &probe, &r);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((input_grad[i] - numeric).abs() / numeric.abs().max(1e-3));
    }
    println!("max relative error over templates and input: {worst:.2e}");
    Ok(())
}
