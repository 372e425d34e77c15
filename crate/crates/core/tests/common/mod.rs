//! Reference implementations used only by tests. Everything here is written
//! with direct loops in f64 and shares no code with the library kernels.
#![allow(dead_code)]

use ddg::dynamic::{DynamicConvLayer, TemplateShape};
use ddg::{Rng, Tensor};

/// Direct grouped convolution with rectangular zero padding.
pub fn naive_conv(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    pad: (usize, usize),
    groups: usize,
) -> Tensor<f64> {
    let (b, c, h, w) = dims4(input);
    let (o, cg, kh, kw) = dims4(kernel);
    assert_eq!(c, cg * groups);
    let og = o / groups;
    let oh = (h + 2 * pad.0 - kh) / stride + 1;
    let ow = (w + 2 * pad.1 - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..cg {
                        let cin = g * cg + ic;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad.0 as isize;
                                let ix = (xx * stride + dx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * c + cin) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * cg + ic) * kh + dy) * kw + dx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, o, oh, ow], out).unwrap()
}

pub fn dims4(t: &Tensor<f64>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// `GAP -> x W1 + b1 -> ReLU -> x W2 + b2 -> softmax`, row per sample.
pub fn naive_adjuster(embedding: &Tensor<f64>, layer: &DynamicConvLayer<f64>) -> Vec<Vec<f64>> {
    let (b, c, h, w) = dims4(embedding);
    let a = &layer.adjuster;
    let (w1, b1, w2, b2) = (a.w1.value.data(), a.b1.value.data(), a.w2.value.data(), a.b2.value.data());
    let hid = b1.len();
    let n = b2.len();
    (0..b)
        .map(|s| {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| {
                    let base = (s * c + ch) * h * w;
                    embedding.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64
                })
                .collect();
            let hidden: Vec<f64> = (0..hid)
                .map(|j| (b1[j] + (0..c).map(|i| pooled[i] * w1[i * hid + j]).sum::<f64>()).max(0.0))
                .collect();
            let logits: Vec<f64> = (0..n)
                .map(|j| b2[j] + (0..hid).map(|i| hidden[i] * w2[i * n + j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Template `n` written into a `[Cout,Cin,k,k]` kernel by coordinate.
pub fn naive_embed(layer: &DynamicConvLayer<f64>, n: usize) -> Tensor<f64> {
    let t = &layer.templates;
    let (ci, co, k) = (t.in_channels(), t.out_channels(), t.kernel_size());
    let c = k / 2;
    let v = &t.templates[n].value;
    let mut out = Tensor::zeros(&[co, ci, k, k]);
    for o in 0..co {
        for i in 0..ci {
            for y in 0..k {
                for x in 0..k {
                    let val = match t.shapes()[n] {
                        TemplateShape::Depthwise => v[(i * k + y) * k + x],
                        TemplateShape::Point if y == c && x == c => v[o * ci + i],
                        TemplateShape::Column if x == c => v[(o * ci + i) * k + y],
                        TemplateShape::Row if y == c => v[(o * ci + i) * k + x],
                        TemplateShape::Full => v[((o * ci + i) * k + y) * k + x],
                        _ => 0.0,
                    };
                    out[((o * ci + i) * k + y) * k + x] = val;
                }
            }
        }
    }
    out
}

/// One sample at a time: build `Θs + Σ λ_n V_n` and convolve directly.
pub fn per_sample_dynamic(input: &Tensor<f64>, embedding: &Tensor<f64>, layer: &DynamicConvLayer<f64>) -> Tensor<f64> {
    let lambdas = naive_adjuster(embedding, layer);
    let embedded: Vec<Tensor<f64>> = (0..layer.templates.len()).map(|n| naive_embed(layer, n)).collect();
    let mut outs = Vec::new();
    for (s, lam) in lambdas.iter().enumerate() {
        let mut kernel = layer.static_kernel.value.clone();
        for (l, e) in lam.iter().zip(&embedded) {
            for (kv, ev) in kernel.data_mut().iter_mut().zip(e.data()) {
                *kv += l * ev;
            }
        }
        let p = layer.padding;
        outs.push(naive_conv(&input.batch_item(s), &kernel, layer.stride, (p, p), 1));
    }
    Tensor::stack_batch(&outs).unwrap()
}

/// `conv(x, Θs) + Σ_n λ_n · branch_n(x)`, every branch convolved with its
/// template in native shape. Requires same-padding (`padding == k / 2`).
pub fn branch_sum_dynamic(input: &Tensor<f64>, embedding: &Tensor<f64>, layer: &DynamicConvLayer<f64>) -> Tensor<f64> {
    let t = &layer.templates;
    let (k, p, s) = (t.kernel_size(), layer.padding, layer.stride);
    assert_eq!(p, k / 2, "branch decomposition needs same padding");
    let co = t.out_channels();
    let lambdas = naive_adjuster(embedding, layer);
    let mut out = naive_conv(input, &layer.static_kernel.value, s, (p, p), 1);
    let (b, _, oh, ow) = dims4(&out);
    for (n, template) in t.templates.iter().enumerate() {
        let v = &template.value;
        let branch = match t.shapes()[n] {
            TemplateShape::Depthwise => {
                let per_channel = naive_conv(input, v, s, (p, p), t.in_channels());
                let (_, ci, _, _) = dims4(&per_channel);
                let mut summed = Tensor::zeros(&[b, co, oh, ow]);
                for bi in 0..b {
                    for o in 0..co {
                        for i in 0..ci {
                            for q in 0..oh * ow {
                                summed[(bi * co + o) * oh * ow + q] += per_channel[(bi * ci + i) * oh * ow + q];
                            }
                        }
                    }
                }
                summed
            }
            TemplateShape::Point => naive_conv(input, v, s, (0, 0), 1),
            TemplateShape::Column => naive_conv(input, v, s, (p, 0), 1),
            TemplateShape::Row => naive_conv(input, v, s, (0, p), 1),
            TemplateShape::Full => naive_conv(input, v, s, (p, p), 1),
        };
        for bi in 0..b {
            let per = co * oh * ow;
            for q in 0..per {
                out[bi * per + q] += lambdas[bi][n] * branch[bi * per + q];
            }
        }
    }
    out
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `f` at every coordinate of `x`, compared with
/// `analytic`. Returns the largest relative error.
pub fn max_fd_error(x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Random projection weights for a scalar test loss `<y, r>`.
pub fn projection(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

use ddg::dynamic::{KernelTemplateSet, MetaAdjuster};
use ddg::network::{build_network, NetworkSpec, StemSpec, Variant};
use ddg::ops::*;

fn proj_loss(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub const FD_STEP: f64 = 1e-6;

/// A dynamic layer with every parameter random.
#[allow(clippy::too_many_arguments)]
pub fn random_dynamic_layer(
    rng: &mut Rng,
    shapes: &[TemplateShape],
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    embed_c: usize,
) -> DynamicConvLayer<f64> {
    let tensors = shapes.iter().map(|s| random_tensor(rng, &s.dims(cin, cout, k))).collect();
    let templates = KernelTemplateSet::from_tensors(shapes, cin, cout, k, tensors).unwrap();
    let mut adjuster = MetaAdjuster::new(embed_c, 1, shapes.len(), rng);
    adjuster.b1.value = rng.uniform_tensor(adjuster.b1.value.shape(), 0.2, 1.0);
    adjuster.b2.value = random_tensor(rng, adjuster.b2.value.shape());
    let kernel = random_tensor(rng, &[cout, cin, k, k]);
    DynamicConvLayer::new(kernel, templates, adjuster, stride, padding).unwrap()
}

/// Finite-difference check of every differentiable primitive. Returns
/// `(name, max relative error)` per checked gradient.
pub fn op_gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let h = FD_STEP;

    // dense
    let x = random_tensor(&mut rng, &[3, 5]);
    let w = random_tensor(&mut rng, &[5, 4]);
    let b = random_tensor(&mut rng, &[4]);
    let r = projection(&mut rng, &[3, 4]);
    let (gx, gw, gb) = dense_backward(&r, &x, &w).unwrap();
    out.push(("dense/input".into(), max_fd_error(&x, &gx, h, |x| proj_loss(&dense_forward(x, &w, &b).unwrap(), &r))));
    out.push(("dense/weight".into(), max_fd_error(&w, &gw, h, |w| proj_loss(&dense_forward(&x, w, &b).unwrap(), &r))));
    out.push(("dense/bias".into(), max_fd_error(&b, &gb, h, |b| proj_loss(&dense_forward(&x, &w, b).unwrap(), &r))));

    // relu (inputs kept away from the kink)
    let x = random_tensor(&mut rng, &[2, 3, 4, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let r = projection(&mut rng, x.shape());
    let g = relu_backward(&r, &x).unwrap();
    out.push(("relu".into(), max_fd_error(&x, &g, h, |x| proj_loss(&relu_forward(x), &r))));

    // global average pool
    let x = random_tensor(&mut rng, &[2, 3, 4, 5]);
    let r = projection(&mut rng, &[2, 3]);
    let g = global_avg_pool_backward(&r, x.shape()).unwrap();
    out.push(("global_avg_pool".into(), max_fd_error(&x, &g, h, |x| proj_loss(&global_avg_pool(x).unwrap(), &r))));

    // softmax
    let x = random_tensor(&mut rng, &[3, 4]).scale(3.0);
    let r = projection(&mut rng, &[3, 4]);
    let p = softmax_forward(&x).unwrap();
    let g = softmax_backward(&r, &p).unwrap();
    out.push(("softmax".into(), max_fd_error(&x, &g, h, |x| proj_loss(&softmax_forward(x).unwrap(), &r))));

    // cross entropy with soft labels
    let x = random_tensor(&mut rng, &[4, 5]).scale(2.0);
    let y = softmax_forward(&random_tensor(&mut rng, &[4, 5])).unwrap();
    let g = cross_entropy_backward(&x, &y).unwrap();
    out.push((
        "cross_entropy".into(),
        max_fd_error(&x, &g, h, |x| cross_entropy_with_soft_labels(x, &y).unwrap()),
    ));

    // batch norm, training mode
    let x = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let gamma = random_tensor(&mut rng, &[2]);
    let beta = random_tensor(&mut rng, &[2]);
    let r = projection(&mut rng, x.shape());
    let bn = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
        let mut stats = RunningStats::new(2);
        batchnorm2d_forward(x, gamma, beta, &mut stats, Mode::Train).unwrap()
    };
    let (_, cache) = bn(&x, &gamma, &beta);
    let (gx, gg, gbt) = batchnorm2d_backward(&r, &cache, &gamma).unwrap();
    out.push(("batchnorm/input".into(), max_fd_error(&x, &gx, h, |x| proj_loss(&bn(x, &gamma, &beta).0, &r))));
    out.push(("batchnorm/gamma".into(), max_fd_error(&gamma, &gg, h, |g| proj_loss(&bn(&x, g, &beta).0, &r))));
    out.push(("batchnorm/beta".into(), max_fd_error(&beta, &gbt, h, |b| proj_loss(&bn(&x, &gamma, b).0, &r))));

    // dense, grouped and depthwise convolution
    for (name, groups, stride, pad) in [("conv", 1, 1, 1), ("conv_stride2", 1, 2, 1), ("grouped_conv", 2, 1, 0), ("depthwise_conv", 4, 2, 1)] {
        let x = random_tensor(&mut rng, &[2, 4, 5, 5]);
        let k = random_tensor(&mut rng, &[4, 4 / groups, 3, 3]);
        let y = grouped_conv2d_forward(&x, &k, stride, pad, groups).unwrap();
        let r = projection(&mut rng, y.shape());
        let (gx, gk) = grouped_conv2d_backward(&r, &x, &k, stride, pad, groups).unwrap();
        let f = |x: &Tensor<f64>, k: &Tensor<f64>| proj_loss(&grouped_conv2d_forward(x, k, stride, pad, groups).unwrap(), &r);
        out.push((format!("{name}/input"), max_fd_error(&x, &gx, h, |x| f(x, &k))));
        out.push((format!("{name}/kernel"), max_fd_error(&k, &gk, h, |k| f(&x, k))));
    }

    // dynamic convolution, both template families
    for (name, shapes) in [
        ("dynamic_asymmetric", TemplateShape::ASYMMETRIC),
        ("dynamic_full", [TemplateShape::Full; 4]),
    ] {
        let layer = random_dynamic_layer(&mut rng, &shapes, 3, 4, 3, 2, 1, 3);
        let x = random_tensor(&mut rng, &[2, 3, 5, 5]);
        let y = ddg::dynamic::dynamic_conv_forward(&x, &layer).unwrap();
        let r = projection(&mut rng, y.shape());
        let (_, cache) = layer.forward(&x, &x).unwrap();
        let gx = ddg::dynamic::dynamic_conv_backward(&r, &layer, Some(&cache)).unwrap().input;
        let grads = layer.backward(&r, &cache).unwrap();
        let run = |l: &DynamicConvLayer<f64>, x: &Tensor<f64>| proj_loss(&ddg::dynamic::dynamic_conv_forward(x, l).unwrap(), &r);
        out.push((format!("{name}/input"), max_fd_error(&x, &gx, h, |x| run(&layer, x))));
        out.push((
            format!("{name}/static_kernel"),
            max_fd_error(&layer.static_kernel.value, &grads.static_kernel, h, |k| {
                let mut l = layer.clone();
                l.static_kernel.value = k.clone();
                run(&l, &x)
            }),
        ));
        for n in 0..4 {
            out.push((
                format!("{name}/template{}", n + 1),
                max_fd_error(&layer.templates.templates[n].value, &grads.templates[n], h, |v| {
                    let mut l = layer.clone();
                    l.templates.templates[n].value = v.clone();
                    run(&l, &x)
                }),
            ));
        }
        let adj: [(&str, &Tensor<f64>, &Tensor<f64>); 4] = [
            ("w1", &layer.adjuster.w1.value, &grads.adjuster_w1),
            ("b1", &layer.adjuster.b1.value, &grads.adjuster_b1),
            ("w2", &layer.adjuster.w2.value, &grads.adjuster_w2),
            ("b2", &layer.adjuster.b2.value, &grads.adjuster_b2),
        ];
        for (i, (pname, value, grad)) in adj.into_iter().enumerate() {
            out.push((
                format!("{name}/adjuster_{pname}"),
                max_fd_error(value, grad, h, |v| {
                    let mut l = layer.clone();
                    l.adjuster.params_mut()[i].value = v.clone();
                    run(&l, &x)
                }),
            ));
        }
    }
    out
}

/// Small network used for whole-model gradient checks.
pub fn tiny_spec(variant: Variant) -> NetworkSpec {
    let stem = StemSpec {
        in_channels: 3,
        out_channels: 4,
        kernel: 3,
        stride: 1,
    };
    NetworkSpec::bottleneck(stem, &[8, 12], &[1, 1], 2, 3, variant).unwrap()
}

/// Finite-difference check of the full network (training-mode batch norm)
/// on sampled coordinates of every parameter tensor and of the input.
pub fn network_gradient_check(variant: Variant, seed: u64, per_tensor: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut net = build_network::<f64>(&tiny_spec(variant), &Rng::new(seed)).unwrap();
    net.randomize_templates(&mut rng, 0.3);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
    let r = projection(&mut rng, &[2, 3]);
    let pass = net.forward(&x, Mode::Train).unwrap();
    net.zero_grad();
    let gx = net.backward(&pass, &r).unwrap();
    let grads: Vec<Tensor<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();
    let h = FD_STEP;
    let loss_at = |net: &mut ddg::network::Network<f64>, x: &Tensor<f64>| {
        proj_loss(net.forward(x, Mode::Train).unwrap().logits(), &r)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for _ in 0..per_tensor {
        let i = rng.below(x.len());
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss_at(&mut net, &probe);
        probe[i] = orig - h;
        let down = loss_at(&mut net, &probe);
        probe[i] = orig;
        worst = worst.max(rel_err(gx[i], (up - down) / (2.0 * h)));
    }
    for (t, grad) in grads.iter().enumerate() {
        let len = grad.len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.below(len);
            let orig = net.params_mut()[t].value[i];
            net.params_mut()[t].value[i] = orig + h;
            let up = loss_at(&mut net, &x);
            net.params_mut()[t].value[i] = orig - h;
            let down = loss_at(&mut net, &x);
            net.params_mut()[t].value[i] = orig;
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// Random shapes for one convolution configuration.
pub struct ConvCase {
    pub input: Tensor<f64>,
    pub kernel: Tensor<f64>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub fn random_conv_case(rng: &mut Rng) -> ConvCase {
    let groups = [1, 1, 2, 3][rng.below(4)];
    let cin = groups * (1 + rng.below(3));
    let cout = groups * (1 + rng.below(3));
    let k = [1, 2, 3, 5][rng.below(4)];
    let padding = rng.below(k / 2 + 2);
    let stride = 1 + rng.below(3);
    let h = k + rng.below(6);
    let w = k + rng.below(6);
    let b = 1 + rng.below(3);
    ConvCase {
        input: random_tensor(rng, &[b, cin, h, w]),
        kernel: random_tensor(rng, &[cout, cin / groups, k, k]),
        stride,
        padding,
        groups,
    }
}

/// Largest difference between library and direct convolution over
/// `cases` random configurations.
pub fn conv_oracle_suite(seed: u64, cases: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = random_conv_case(&mut rng);
        let fast = grouped_conv2d_forward(&c.input, &c.kernel, c.stride, c.padding, c.groups).unwrap();
        let slow = naive_conv(&c.input, &c.kernel, c.stride, (c.padding, c.padding), c.groups);
        worst = worst.max(fast.max_abs_diff(&slow).unwrap());
    }
    worst
}

pub fn random_dynamic_case(rng: &mut Rng) -> (DynamicConvLayer<f64>, Tensor<f64>) {
    let shapes = match rng.below(3) {
        0 => TemplateShape::ASYMMETRIC,
        1 => [TemplateShape::Point; 4],
        _ => [TemplateShape::Full; 4],
    };
    let k = [1, 3, 5][rng.below(3)];
    let cin = 1 + rng.below(4);
    let cout = 1 + rng.below(4);
    let stride = 1 + rng.below(2);
    let layer = random_dynamic_layer(rng, &shapes, cin, cout, k, stride, k / 2, cin);
    let h = k + rng.below(5);
    let w = k + rng.below(5);
    let b = 1 + rng.below(4);
    let x = random_tensor(rng, &[b, cin, h, w]);
    (layer, x)
}

/// `(assembled vs branch-sum, grouped-batch vs per-sample)` maximum
/// differences over `cases` random dynamic layers.
pub fn dynamic_oracle_suite(seed: u64, cases: usize) -> (f64, f64) {
    let mut rng = Rng::new(seed);
    let (mut branch, mut per_sample): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let (layer, x) = random_dynamic_case(&mut rng);
        let fast = ddg::dynamic::dynamic_conv_forward(&x, &layer).unwrap();
        let loop_out = per_sample_dynamic(&x, &x, &layer);
        let branch_out = branch_sum_dynamic(&x, &x, &layer);
        per_sample = per_sample.max(fast.max_abs_diff(&loop_out).unwrap());
        branch = branch.max(fast.max_abs_diff(&branch_out).unwrap());
    }
    (branch, per_sample)
}

/// Parameter count of a bottleneck network, computed stage by stage from
/// the layer shapes alone.
pub fn expected_params(stem: (usize, usize, usize), widths: &[usize], depth: usize, classes: usize, variant: Variant) -> usize {
    let (cin, cout, ks) = stem;
    let bn = |c: usize| 2 * c;
    let mut total = cout * cin * ks * ks + bn(cout);
    let mut prev = cout;
    for (stage, &w) in widths.iter().enumerate() {
        let m = w / 4;
        for block in 0..depth {
            let strided = stage > 0 && block == 0;
            total += prev * m + bn(m) + m * m * 9 + bn(m) + m * w + bn(w);
            if strided || prev != w {
                total += prev * w + bn(w);
            }
            let hidden = (prev / 4).max(1);
            let adjuster = prev * hidden + hidden + hidden * 4 + 4;
            total += match variant {
                Variant::Static => 0,
                Variant::Asymmetric => m * 9 + m * m + 2 * m * m * 3 + adjuster,
                Variant::Identical1x1 => 4 * m * m + adjuster,
                Variant::Identical3x3 => 4 * m * m * 9 + adjuster,
            };
            prev = w;
        }
    }
    total + prev * classes + classes
}
