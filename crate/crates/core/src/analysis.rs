//! Spatial kernel-magnitude maps and dynamic-coefficient dumps.

use std::fmt::Write;

use crate::data::{stack_samples, DomainSample};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

/// `k x k` maps of mean absolute kernel weight, one per layer plus an
/// aggregate. Every map is scaled so its largest entry is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMagnitudeMatrix {
    pub k: usize,
    /// Row-major `k x k` maps, with the index of the block they come from.
    pub layers: Vec<(usize, Vec<f64>)>,
    pub aggregate: Vec<f64>,
}

fn max_normalize(m: &mut [f64]) {
    let max = m.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.iter_mut().for_each(|v| *v /= max);
    }
}

/// Mean of `|w|` over every leading index at each spatial position of a
/// set of `[.., k, k]` kernels, max-normalized.
pub fn spatial_magnitude<T: Scalar>(kernels: &[Tensor<T>]) -> Result<Vec<f64>> {
    let first = kernels.first().ok_or_else(|| Error::Validation("no kernels".into()))?;
    let shape = first.shape();
    let (kh, kw) = match shape {
        [.., a, b] => (*a, *b),
        _ => return Err(Error::shape("spatial_magnitude", "kernel rank", format!("{shape:?}"))),
    };
    let mut acc = vec![0.0; kh * kw];
    let mut count = 0usize;
    for t in kernels {
        if t.shape() != shape {
            return Err(Error::shape("spatial_magnitude", "kernel shapes", format!("{shape:?} vs {:?}", t.shape())));
        }
        for chunk in t.data().chunks(kh * kw) {
            for (a, v) in acc.iter_mut().zip(chunk) {
                *a += v.as_f64().abs();
            }
            count += 1;
        }
    }
    acc.iter_mut().for_each(|v| *v /= count as f64);
    max_normalize(&mut acc);
    Ok(acc)
}

impl KernelMagnitudeMatrix {
    /// Build from per-layer kernel sets (several entries per layer when
    /// the kernels are instance-specific).
    pub fn from_layers<T: Scalar>(layers: &[(usize, Vec<Tensor<T>>)]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("no layers to summarize".into()));
        }
        let mut maps = Vec::new();
        for (idx, kernels) in layers {
            maps.push((*idx, spatial_magnitude(kernels)?));
        }
        let n = maps[0].1.len();
        let k = (n as f64).sqrt() as usize;
        if k * k != n || maps.iter().any(|(_, m)| m.len() != n) {
            return Err(Error::Validation("layers must share one square kernel size".into()));
        }
        let mut aggregate = vec![0.0; n];
        for (_, m) in &maps {
            for (a, v) in aggregate.iter_mut().zip(m) {
                *a += v / maps.len() as f64;
            }
        }
        max_normalize(&mut aggregate);
        Ok(KernelMagnitudeMatrix {
            k,
            layers: maps,
            aggregate,
        })
    }

    /// `layer,row,col,magnitude` rows; the aggregate uses layer `all`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,row,col,magnitude\n");
        let named = self
            .layers
            .iter()
            .map(|(i, m)| (i.to_string(), m))
            .chain(std::iter::once(("all".to_string(), &self.aggregate)));
        for (name, m) in named {
            for (i, v) in m.iter().enumerate() {
                let _ = writeln!(s, "{name},{},{},{v}", i / self.k, i % self.k);
            }
        }
        s
    }

    /// (mean over the center row and column, mean over the four corners)
    /// of the aggregate map.
    pub fn skeleton_vs_corners(&self) -> (f64, f64) {
        skeleton_vs_corners(&self.aggregate, self.k)
    }
}

pub fn skeleton_vs_corners(m: &[f64], k: usize) -> (f64, f64) {
    let c = k / 2;
    let cross: Vec<f64> = (0..k * k)
        .filter(|&i| i / k == c || i % k == c)
        .map(|i| m[i])
        .collect();
    let corners = [0, k - 1, k * (k - 1), k * k - 1].map(|i| m[i]);
    (
        cross.iter().sum::<f64>() / cross.len() as f64,
        corners.iter().sum::<f64>() / 4.0,
    )
}

/// Binary 8-bit graymap of a max-normalized map, each cell drawn as a
/// `scale x scale` square.
pub fn to_pgm(m: &[f64], k: usize, scale: usize) -> Vec<u8> {
    let side = k * scale;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = m[(y / scale) * k + x / scale];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Kernel magnitude of every block's middle convolution. Dynamic blocks
/// need `probe` images, whose instance kernels are averaged.
pub fn export_kernel_magnitude<T: Scalar>(
    network: &mut Network<T>,
    probe: Option<&Tensor<T>>,
) -> Result<KernelMagnitudeMatrix> {
    let kernels = network.middle_kernels(probe)?;
    let layers: Vec<(usize, Vec<Tensor<T>>)> = kernels.into_iter().enumerate().collect();
    KernelMagnitudeMatrix::from_layers(&layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub block: usize,
    pub sample: usize,
    /// Source domain, or [`crate::data::MIXED`].
    pub domain: i64,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientDump {
    pub rows: Vec<CoefficientRow>,
}

impl CoefficientDump {
    pub fn to_csv(&self) -> String {
        let n = self.rows.first().map_or(4, |r| r.lambdas.len());
        let mut s = String::from("block,sample,domain");
        for i in 1..=n {
            let _ = write!(s, ",lambda{i}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.block, r.sample, r.domain);
            for l in &r.lambdas {
                let _ = write!(s, ",{l}");
            }
            s.push('\n');
        }
        s
    }
}

/// Meta-adjuster outputs for every sample at the given blocks, in eval
/// mode. Rows are sample-major, blocks in the requested order.
pub fn export_coefficients(
    network: &mut Network<f32>,
    samples: &[DomainSample],
    blocks: &[usize],
    batch_size: usize,
) -> Result<CoefficientDump> {
    let dynamic = network.dynamic_blocks();
    for &b in blocks {
        if !dynamic.contains(&b) {
            return Err(Error::Usage(format!(
                "block {b} has no dynamic convolution (dynamic blocks: {dynamic:?})"
            )));
        }
    }
    let mut rows = Vec::with_capacity(samples.len() * blocks.len());
    let mut offset = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, _) = stack_samples(&chunk.iter().collect::<Vec<_>>())?;
        let pass = network.forward(&images, Mode::Eval)?;
        for (i, s) in chunk.iter().enumerate() {
            for &b in blocks {
                let coeffs = &pass
                    .coefficient_trace
                    .iter()
                    .find(|(blk, _)| *blk == b)
                    .expect("requested block is dynamic")
                    .1;
                let n = coeffs.shape()[1];
                rows.push(CoefficientRow {
                    block: b,
                    sample: offset + i,
                    domain: s.domain_code(),
                    lambdas: coeffs.data()[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect(),
                });
            }
        }
        offset += chunk.len();
    }
    Ok(CoefficientDump { rows })
}
