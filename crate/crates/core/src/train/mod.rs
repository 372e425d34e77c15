//! Leave-one-domain-out training, evaluation, checkpoints and ablations.

mod ablation;
mod checkpoint;
mod record;
mod split;

pub use ablation::{ablation_suite, AblationRow, AblationTable, ABLATION_CSV_HEADER};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use record::{mean_std, EpochRecord, ExperimentReport, RunRecord};
pub use split::Split;

use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, mix_batch, domain_balanced_batches, stack_samples, DomainSample};
use crate::error::{Error, Result};
use crate::network::{build_network, Network, NetworkSpec};
use crate::ops::{argmax_rows, cosine_lr, cross_entropy_backward, cross_entropy_with_soft_labels, sgd_step, Mode, SgdConfig};
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network<f32>,
    /// Momentum buffers, aligned with `network.params_mut()`.
    pub velocity: Vec<Tensor<f32>>,
    /// Drives batch order and DomainMix draws.
    pub rng: Rng,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh state for `seed`: network weights and the training stream are
    /// both derived from it.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let mut network: Network<f32> = build_network(spec, &root)?;
        let velocity = network.params_mut().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(TrainState {
            network,
            velocity,
            rng: root.derive(3),
            history: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

/// One pass over the training split with domain-balanced batches.
pub fn train_epoch(state: &mut TrainState, train: &[DomainSample], config: &ExperimentConfig) -> Result<EpochRecord> {
    let t = &config.training;
    let epoch = state.epochs_done();
    let lr = cosine_lr(epoch, t.epochs, t.base_lr)?;
    let sgd = SgdConfig {
        lr,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    };
    let batches = domain_balanced_batches(train, t.batch_size, &mut state.rng)?;
    if batches.is_empty() {
        return Err(Error::Config(format!(
            "batch size {} exceeds what the smallest source domain can fill",
            t.batch_size
        )));
    }
    let mut total = 0.0;
    for (step, idx) in batches.iter().enumerate() {
        let where_ = || format!("epoch {epoch} step {step}");
        let batch: Vec<DomainSample> = idx.iter().map(|&i| train[i].clone()).collect();
        let batch = mix_batch(&batch, &config.domainmix, &mut state.rng)?;
        let (images, labels) = stack_samples(&batch.iter().collect::<Vec<_>>())?;
        let pass = state.network.forward(&images, Mode::Train).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} at {}", where_()),
            },
            other => other,
        })?;
        let loss = cross_entropy_with_soft_labels(pass.logits(), &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at {}", where_()),
            });
        }
        total += loss as f64;
        let grad = cross_entropy_backward(pass.logits(), &labels)?;
        state.network.zero_grad();
        state.network.backward(&pass, &grad)?;
        for (p, v) in state.network.params_mut().into_iter().zip(&mut state.velocity) {
            let Param { value, grad } = p;
            sgd_step(value, grad, v, sgd)?;
        }
    }
    state.network.zero_grad();
    let record = EpochRecord {
        epoch,
        lr,
        loss: total / batches.len() as f64,
        steps: batches.len(),
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Fraction of samples whose arg-max logit matches the arg-max label.
/// Ties resolve to the lowest class index.
pub fn evaluate(network: &mut Network<f32>, samples: &[DomainSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate on zero samples".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, _) = stack_samples(&chunk.iter().collect::<Vec<_>>())?;
        let logits = network.predict(&images)?;
        let pred = argmax_rows(&logits)?;
        correct += pred.iter().zip(chunk).filter(|(&p, s)| p == s.class()).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train one seed to completion, optionally continuing from `resume`.
/// `on_epoch` sees the state after every finished epoch.
pub fn run_seed(
    config: &ExperimentConfig,
    split: &Split,
    seed: u64,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<(RunRecord, TrainState)> {
    config.validate()?;
    split.check_isolation()?;
    let spec = config.spec()?;
    let started = Instant::now();
    let mut state = match resume {
        Some(s) => {
            if s.network.spec() != &spec {
                return Err(Error::Config("checkpoint network does not match the configured network".into()));
            }
            s
        }
        None => TrainState::new(&spec, seed)?,
    };
    while state.epochs_done() < config.training.epochs {
        train_epoch(&mut state, &split.train, config)?;
        on_epoch(&state)?;
    }
    let eval_bs = config.training.eval_batch_size;
    let target_accuracy = evaluate(&mut state.network, &split.target, eval_bs)?;
    let validation_accuracy = if split.validation.is_empty() {
        None
    } else {
        Some(evaluate(&mut state.network, &split.validation, eval_bs)?)
    };
    let record = RunRecord {
        config_toml: config.to_toml()?,
        config_hash: config.hash()?,
        split_hash: split.hash(),
        variant: config.network.variant.to_string(),
        domainmix: config.domainmix.enabled(),
        target_domain: config.target_domain,
        seed,
        params: state.network.param_count(),
        epochs: state.history.clone(),
        target_accuracy,
        validation_accuracy,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((record, state))
}

/// Generate the dataset, hold out the target domain and train every seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = generate_dataset(&config.dataset)?;
    let split = Split::new(&dataset, config.target_domain, config.training.validation_fraction)?;
    run_experiment_on(config, &split)
}

/// Like [`run_experiment`] but on an existing split.
pub fn run_experiment_on(config: &ExperimentConfig, split: &Split) -> Result<ExperimentReport> {
    let records = config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, split, seed, None, |_| Ok(())).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    ExperimentReport::new(records)
}
