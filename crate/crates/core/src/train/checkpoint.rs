use std::path::Path;

use super::{EpochRecord, TrainState};
use crate::error::{Error, Result};
use crate::io::{decode_tensors, encode_tensors, take_named, AnyTensor, NamedTensor};
use crate::network::{build_network, NetworkSpec};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

fn limbs(v: u128, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((v >> (32 * i)) & 0xFFFF_FFFF) as f64).collect()
}

fn from_limbs(v: &[f64]) -> Result<u128> {
    v.iter().enumerate().try_fold(0u128, |acc, (i, &x)| {
        if !(0.0..4294967296.0).contains(&x) || x.fract() != 0.0 {
            return Err(Error::Format("corrupt rng state".into()));
        }
        Ok(acc | ((x as u128) << (32 * i)))
    })
}

fn f64_tensor(values: Vec<f64>, shape: &[usize]) -> Result<AnyTensor> {
    Ok(AnyTensor::F64(Tensor::from_vec(shape, values)?))
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let net = &state.network;
    let mut out: Vec<NamedTensor> = Vec::new();
    let spec = net.spec().encode();
    out.push(("meta/spec".into(), f64_tensor(spec.clone(), &[spec.len()])?));
    out.push(("meta/epoch".into(), f64_tensor(vec![state.epochs_done() as f64], &[1])?));
    let rs = state.rng.state();
    let mut rng = limbs(rs.seed as u128, 2);
    rng.extend(limbs(rs.word_pos, 4));
    out.push(("meta/rng".into(), f64_tensor(rng, &[6])?));
    let hist: Vec<f64> = state
        .history
        .iter()
        .flat_map(|e| [e.epoch as f64, e.lr, e.loss, e.steps as f64])
        .collect();
    out.push(("meta/history".into(), f64_tensor(hist, &[state.history.len(), 4])?));
    let params = net.named_params();
    if params.len() != state.velocity.len() {
        return Err(Error::Validation("momentum buffers do not match the network".into()));
    }
    for (name, p) in &params {
        out.push((format!("param/{name}"), p.value.clone().into()));
    }
    for ((name, _), v) in params.iter().zip(&state.velocity) {
        out.push((format!("momentum/{name}"), v.clone().into()));
    }
    for (name, b) in net.named_buffers() {
        out.push((format!("buffer/{name}"), b.clone().into()));
    }
    encode_tensors(&out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut tensors = decode_tensors(bytes)?;
    let spec = NetworkSpec::decode(&take_named(&mut tensors, "meta/spec")?.to_f64_vec())?;
    let epoch = take_named(&mut tensors, "meta/epoch")?.to_f64_vec();
    let rng = take_named(&mut tensors, "meta/rng")?.to_f64_vec();
    if rng.len() != 6 || epoch.len() != 1 {
        return Err(Error::Format("malformed checkpoint metadata".into()));
    }
    let rng = Rng::from_state(RngState {
        seed: from_limbs(&rng[..2])? as u64,
        word_pos: from_limbs(&rng[2..])?,
    });
    let history: Vec<EpochRecord> = take_named(&mut tensors, "meta/history")?
        .to_f64_vec()
        .chunks_exact(4)
        .map(|c| EpochRecord {
            epoch: c[0] as usize,
            lr: c[1],
            loss: c[2],
            steps: c[3] as usize,
        })
        .collect();
    if history.len() as f64 != epoch[0] {
        return Err(Error::Format("checkpoint epoch disagrees with its history".into()));
    }
    let mut network = build_network::<f32>(&spec, &Rng::new(0))?;
    let mut params = Vec::new();
    let mut velocity = Vec::new();
    for (name, _) in network.named_params() {
        params.push((name.clone(), take_named(&mut tensors, &format!("param/{name}"))?.into_scalar(&name)?));
        velocity.push(take_named(&mut tensors, &format!("momentum/{name}"))?.into_scalar::<f32>(&name)?);
    }
    let mut buffers = Vec::new();
    for (name, _) in network.named_buffers() {
        buffers.push((name.clone(), take_named(&mut tensors, &format!("buffer/{name}"))?.into_scalar(&name)?));
    }
    if let Some((name, _)) = tensors.first() {
        return Err(Error::Format(format!("unexpected tensor '{name}' in checkpoint")));
    }
    network.load_named(&params, &buffers)?;
    for ((name, p), v) in params.iter().zip(&velocity) {
        if p.shape() != v.shape() {
            return Err(Error::Format(format!("momentum for '{name}' has the wrong shape")));
        }
    }
    Ok(TrainState {
        network,
        velocity,
        rng,
        history,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
