//! Release gate. Each check prints one `PASS`/`FAIL` line; the test fails
//! if any check does. The toy generalization check trains 36 networks and
//! dominates the runtime.
//!
//! cargo test --release -p ddg --test acceptance -- --nocapture

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use ddg::analysis::{export_coefficients, export_kernel_magnitude};
use ddg::config::ExperimentConfig;
use ddg::data::{domain_mix, domain_mix_with_alpha, generate_dataset, stack_samples, DomainMixConfig, DomainSample};
use ddg::dynamic::{adjuster_coefficients, assemble_dynamic_kernel, dynamic_conv_forward, KernelTemplateSet, MetaAdjuster, TemplateShape};
use ddg::network::{build_network, Network, NetworkSpec, Variant};
use ddg::ops::{conv2d_forward, Mode};
use ddg::train::*;
use ddg::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Gate {
    failed: Vec<&'static str>,
}

impl Gate {
    fn check(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        let started = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => report(format_args!("PASS {name}: {detail} [{secs:.1}s]")),
            Err(detail) => {
                report(format_args!("FAIL {name}: {detail} [{secs:.1}s]"));
                self.failed.push(name);
            }
        }
    }
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut ops: f64 = 0.0;
    for seed in [1, 2] {
        for (name, err) in op_gradient_suite(seed) {
            ensure(err < 1e-5, format!("{name}: relative error {err:e}"))?;
            ops = ops.max(err);
        }
    }
    let mut net: f64 = 0.0;
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let err = network_gradient_check(v, 30 + i as u64, 6);
        ensure(err < 1e-4, format!("{v} network: relative error {err:e}"))?;
        net = net.max(err);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!("ops max {ops:.1e} < 1e-5, networks max {net:.1e} < 1e-4"))
}

fn oracle_equivalence() -> Outcome {
    let conv = conv_oracle_suite(101, 120);
    let (branch, per_sample) = dynamic_oracle_suite(102, 120);
    ensure(conv < 1e-12, format!("conv vs loops {conv:e}"))?;
    ensure(branch < 1e-12, format!("assembled vs branch sum {branch:e}"))?;
    ensure(per_sample < 1e-12, format!("grouped vs per-sample {per_sample:e}"))?;
    Ok(format!(
        "120 configurations each: conv {conv:.1e}, branch sum {branch:.1e}, per-sample {per_sample:.1e} (< 1e-12)"
    ))
}

fn mechanism_invariants() -> Outcome {
    let mut rng = Rng::new(41);
    let adj: MetaAdjuster<f64> = MetaAdjuster::new(8, 4, 4, &mut rng);
    for _ in 0..1000 {
        let x = rng.normal_tensor(&[1, 8, 3, 3], 5.0);
        let lam = adjuster_coefficients(&x, &adj).map_err(|e| e.to_string())?;
        ensure(lam.data().iter().all(|&v| v >= 0.0), "negative coefficient")?;
        ensure((lam.sum() - 1.0).abs() < 1e-12, format!("coefficients sum to {}", lam.sum()))?;
    }

    for shapes in [TemplateShape::ASYMMETRIC, [TemplateShape::Point; 4], [TemplateShape::Full; 4]] {
        let mut layer = random_dynamic_layer(&mut rng, &shapes, 3, 5, 3, 1, 1, 3);
        layer.templates.templates.iter_mut().for_each(|t| t.value.fill(0.0));
        let x = random_tensor(&mut rng, &[3, 3, 6, 6]);
        let dynamic = dynamic_conv_forward(&x, &layer).map_err(|e| e.to_string())?;
        let fixed = conv2d_forward(&x, &layer.static_kernel.value, 1, 1).map_err(|e| e.to_string())?;
        ensure(dynamic.bitwise_eq(&fixed), "zero templates differ from the static conv")?;
    }
    let x = rng.normal_tensor::<f32>(&[4, 3, 16, 16], 1.0);
    for v in [Variant::Asymmetric, Variant::Identical1x1, Variant::Identical3x3] {
        let seed = Rng::new(5);
        let mut fixed: Network<f32> = build_network(&NetworkSpec::toy(Variant::Static, 5), &seed).unwrap();
        let mut dynamic: Network<f32> = build_network(&NetworkSpec::toy(v, 5), &seed).unwrap();
        let a = fixed.forward(&x, Mode::Train).unwrap();
        let b = dynamic.forward(&x, Mode::Train).unwrap();
        ensure(a.logits().bitwise_eq(b.logits()), format!("{v} network differs from static at init"))?;
    }

    let shapes = TemplateShape::ASYMMETRIC;
    let tensors = shapes.iter().map(|s| random_tensor(&mut rng, &s.dims(3, 2, 5))).collect();
    let set = KernelTemplateSet::from_tensors(&shapes, 3, 2, 5, tensors).unwrap();
    for n in 1..4 {
        let mut coeffs = [0.0; 4];
        coeffs[n] = 1.0;
        let k = assemble_dynamic_kernel(&coeffs, &set).unwrap();
        for c in k.data().chunks(25) {
            for corner in [0, 4, 20, 24] {
                ensure(c[corner] == 0.0, format!("template {} touches a corner", n + 1))?;
            }
        }
    }

    let cfg = ExperimentConfig::default().dataset;
    let data = generate_dataset(&ddg::data::SyntheticDatasetConfig {
        samples_per_class: 3,
        image_size: 12,
        ..cfg
    })
    .unwrap();
    let by_domain = |d: usize| data.iter().filter(move |s| s.domain == Some(d));
    let (a, b) = (by_domain(0).next().unwrap(), by_domain(2).nth(4).unwrap());
    let same = domain_mix_with_alpha(a, b, 1.0).unwrap();
    ensure(same.image.bitwise_eq(&a.image) && same.label.bitwise_eq(&a.label), "alpha = 1 is not the identity")?;
    let mut pairs = 0;
    for s in by_domain(1) {
        for t in by_domain(3) {
            let m = domain_mix(s, t, &mut rng, 1.0, 1.0).unwrap();
            for ((&v, &p), &q) in m.image.data().iter().zip(s.image.data()).zip(t.image.data()) {
                ensure(p.min(q) <= v && v <= p.max(q), "mixed pixel leaves the convex hull")?;
            }
            pairs += 1;
        }
    }
    Ok(format!(
        "simplex over 1000 inputs, bitwise zero-template reduction, empty corners, mix endpoint and {pairs} hull checks"
    ))
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.image_size = 8;
    c.dataset.samples_per_class = 4;
    c.network.widths = vec![4, 8];
    c.network.blocks_per_stage = vec![1, 1];
    c.network.expansion = 2;
    c.training.epochs = 3;
    c.training.batch_size = 6;
    c
}

fn determinism() -> Outcome {
    let c = tiny_config();
    let data = generate_dataset(&c.dataset).unwrap();
    let split = Split::new(&data, c.target_domain, 0.0).unwrap();
    let run = || {
        let (record, mut state) = run_seed(&c, &split, 8, None, |_| Ok(())).unwrap();
        let (probe, _) = stack_samples(&split.target.iter().take(8).collect::<Vec<_>>()).unwrap();
        let kmm = export_kernel_magnitude(&mut state.network, Some(&probe)).unwrap().to_csv();
        let blocks = state.network.dynamic_blocks();
        let coeffs = export_coefficients(&mut state.network, &data, &blocks, 16).unwrap().to_csv();
        let bits: Vec<u64> = record.losses().iter().map(|l| l.to_bits()).collect();
        (bits, kmm, coeffs)
    };
    let (a, b) = (run(), run());
    ensure(a.0 == b.0, "loss trajectories differ")?;
    ensure(a.1 == b.1, "kernel magnitude CSVs differ")?;
    ensure(a.2 == b.2, "coefficient CSVs differ")?;
    Ok(format!("{} epochs bitwise equal, both CSV exports identical", a.0.len()))
}

fn parameter_accounting() -> Outcome {
    for v in Variant::ALL {
        for (widths, depth) in [(&[16, 32][..], 2), (&[16, 32, 64][..], 2), (&[8, 16, 32, 64][..], 1)] {
            let spec = NetworkSpec::toy_with_widths(v, 5, widths, depth);
            let expect = expected_params((3, widths[0], 3), widths, depth, 5, v);
            let net: Network<f32> = build_network(&spec, &Rng::new(0)).unwrap();
            ensure(spec.param_count() == expect, format!("{v} {widths:?}: closed form {} vs {expect}", spec.param_count()))?;
            ensure(net.param_count() == expect, format!("{v} {widths:?}: built {} vs {expect}", net.param_count()))?;
        }
    }
    let counts: Vec<usize> = Variant::ALL.iter().map(|&v| NetworkSpec::resnet50(v, 1000).param_count()).collect();
    ensure(counts.windows(2).all(|w| w[0] < w[1]), format!("ordering broken: {counts:?}"))?;
    let m = |c: usize| format!("{:.2}M", c as f64 / 1e6);
    Ok(format!(
        "exact at toy widths; ResNet-50 widths static {} < 1x1 {} < asymmetric {} < 3x3 {}",
        m(counts[0]),
        m(counts[1]),
        m(counts[2]),
        m(counts[3])
    ))
}

fn checkpoint_round_trip() -> Outcome {
    let mut c = tiny_config();
    c.training.epochs = 4;
    let split = Split::new(&generate_dataset(&c.dataset).unwrap(), c.target_domain, 0.0).unwrap();
    let mut halfway = None;
    let (straight, finished) = run_seed(&c, &split, 3, None, |s| {
        if s.epochs_done() == 2 {
            halfway = Some(encode_checkpoint(s)?);
        }
        Ok(())
    })
    .unwrap();
    let bytes = encode_checkpoint(&finished).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ddgt");
    save_checkpoint(&path, &finished).unwrap();
    let reloaded = load_checkpoint(&path).unwrap();
    ensure(encode_checkpoint(&reloaded).unwrap() == bytes, "save -> load -> save changed bytes")?;

    let resume = decode_checkpoint(&halfway.unwrap()).unwrap();
    let (resumed, state) = run_seed(&c, &split, 3, Some(resume), |_| Ok(())).unwrap();
    let bits = |r: &RunRecord| r.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    ensure(bits(&resumed) == bits(&straight), "resumed losses differ")?;
    ensure(encode_checkpoint(&state).unwrap() == bytes, "resumed weights differ")?;
    Ok(format!("{} byte checkpoint stable; resume after epoch 2 bitwise identical", bytes.len()))
}

/// Settings of the toy generalization study, pinned before the gate seeds
/// were run: 16x16 renders to fit the CPU budget and Beta(0.2, 0.2) mixing.
fn toy_study_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.image_size = 16;
    c.dataset.samples_per_class = 200;
    c.training.epochs = 30;
    c.domainmix.beta_a = 0.2;
    c.domainmix.beta_b = 0.2;
    c
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct ToyStudy {
    full: Vec<f64>,
    fixed: Vec<f64>,
    unmixed: Vec<f64>,
    /// Networks of the full method with the last domain held out, one per seed.
    trained: Vec<(Network<f32>, Vec<DomainSample>)>,
    secs: f64,
}

fn run_toy_study() -> ToyStudy {
    let started = Instant::now();
    let base = toy_study_config();
    let data = generate_dataset(&base.dataset).unwrap();
    let last = base.dataset.num_domains - 1;
    let mut study = ToyStudy {
        full: vec![],
        fixed: vec![],
        unmixed: vec![],
        trained: vec![],
        secs: 0.0,
    };
    for target in 0..base.dataset.num_domains {
        let split = Split::new(&data, target, 0.0).unwrap();
        for seed in SEEDS {
            let mut full = base.clone();
            full.target_domain = target;
            let mut fixed = full.with_variant(Variant::Static);
            fixed.domainmix = DomainMixConfig::disabled();
            let mut unmixed = full.clone();
            unmixed.domainmix = DomainMixConfig::disabled();

            let (r, state) = run_seed(&full, &split, seed, None, |_| Ok(())).unwrap();
            study.full.push(r.target_accuracy);
            if target == last {
                study.trained.push((state.network, split.target.clone()));
            }
            study.fixed.push(run_seed(&fixed, &split, seed, None, |_| Ok(())).unwrap().0.target_accuracy);
            study.unmixed.push(run_seed(&unmixed, &split, seed, None, |_| Ok(())).unwrap().0.target_accuracy);
            report(format_args!(
                "  target {target} seed {seed}: full {:.3} static {:.3} without mixing {:.3}",
                study.full.last().unwrap(),
                study.fixed.last().unwrap(),
                study.unmixed.last().unwrap()
            ));
        }
    }
    study.secs = started.elapsed().as_secs_f64();
    study
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn toy_trend(study: &ToyStudy) -> Outcome {
    let (full, fixed, unmixed) = (mean(&study.full), mean(&study.fixed), mean(&study.unmixed));
    let detail = format!(
        "12-run means: full {:.2}%, static {:.2}%, without mixing {:.2}% in {:.0} min",
        100.0 * full,
        100.0 * fixed,
        100.0 * unmixed,
        study.secs / 60.0
    );
    ensure(study.full.len() == 12, "expected 12 runs per arm")?;
    ensure(full - fixed >= 0.005, format!("full - static = {:.2} points < 0.5; {detail}", 100.0 * (full - fixed)))?;
    ensure(
        full - unmixed >= 0.005,
        format!("full - without mixing = {:.2} points < 0.5; {detail}", 100.0 * (full - unmixed)),
    )?;
    ensure(study.secs < 7200.0, format!("runtime over 2 hours; {detail}"))?;
    Ok(detail)
}

fn skeleton_trend(study: &mut ToyStudy) -> Outcome {
    let mut wins = 0;
    let mut parts = vec![];
    for (net, target) in &mut study.trained {
        let (probe, _) = stack_samples(&target.iter().take(32).collect::<Vec<_>>()).unwrap();
        let kmm = export_kernel_magnitude(net, Some(&probe)).unwrap();
        let (cross, corners) = kmm.skeleton_vs_corners();
        wins += (cross > corners) as usize;
        parts.push(format!("{cross:.3}/{corners:.3}"));
    }
    let detail = format!("center cross / corners per seed: {}", parts.join(", "));
    ensure(parts.len() == 3 && wins >= 2, format!("{wins} of {} seeds; {detail}", parts.len()))?;
    Ok(format!("{wins} of 3 seeds; {detail}"))
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate { failed: vec![] };
    gate.check("gradient suite", gradient_suite);
    gate.check("oracle equivalence", oracle_equivalence);
    gate.check("mechanism invariants", mechanism_invariants);
    gate.check("determinism", determinism);
    gate.check("parameter accounting", parameter_accounting);
    gate.check("checkpoint round trip", checkpoint_round_trip);

    let study = catch_unwind(run_toy_study);
    match study {
        Ok(mut study) => {
            gate.check("toy generalization trend", || toy_trend(&study));
            gate.check("kernel skeleton trend", || skeleton_trend(&mut study));
        }
        Err(_) => {
            gate.check("toy generalization trend", || Err("training panicked".into()));
            gate.check("kernel skeleton trend", || Err("training panicked".into()));
        }
    }
    assert!(gate.failed.is_empty(), "failed: {:?}", gate.failed);
}

// Written straight to stderr so the lines survive libtest output capture.
fn report(line: std::fmt::Arguments) {
    use std::io::Write;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
