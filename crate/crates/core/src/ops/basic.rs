//! Fully connected, activation, pooling, softmax and loss primitives.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// `input [B,D] x weight [D,E] + bias [E]`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let op = "dense_forward";
    let [b, d] = input.dims2(op)?;
    let [wd, e] = weight.dims2(op)?;
    if wd != d {
        return Err(Error::shape(op, "input axis 1 vs weight axis 0", format!("{d} vs {wd}")));
    }
    if bias.shape() != [e] {
        return Err(Error::shape(op, "bias axis 0", format!("expected [{e}], got {:?}", bias.shape())));
    }
    let mut out = Tensor::zeros(&[b, e]);
    for row in out.data_mut().chunks_mut(e.max(1)) {
        row.copy_from_slice(bias.data());
    }
    gemm(MatRef::new(input.data(), b, d), MatRef::new(weight.data(), d, e), T::one(), out.data_mut());
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let op = "dense_backward";
    let [b, d] = input.dims2(op)?;
    let [_, e] = weight.dims2(op)?;
    if grad_out.shape() != [b, e] {
        return Err(Error::shape(op, "grad_out", format!("expected [{b}, {e}], got {:?}", grad_out.shape())));
    }
    let mut gi = Tensor::zeros(&[b, d]);
    let mut gw = Tensor::zeros(&[d, e]);
    let mut gb = Tensor::zeros(&[e]);
    let go = MatRef::new(grad_out.data(), b, e);
    gemm(go, MatRef::new(weight.data(), d, e).t(), T::zero(), gi.data_mut());
    gemm(MatRef::new(input.data(), b, d).t(), go, T::zero(), gw.data_mut());
    for row in grad_out.data().chunks(e.max(1)) {
        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((gi, gw, gb))
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the forward *input*; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.same_shape(input, "relu_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// `[B,C,H,W] -> [B,C]`
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4("global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let data = input
        .data()
        .chunks(hw.max(1))
        .take(b * c)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let op = "global_avg_pool_backward";
    let [b, c, h, w] = match input_shape {
        &[b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::shape(op, "rank", format!("{input_shape:?}"))),
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::shape(op, "grad_out", format!("expected [{b}, {c}], got {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let mut gi = Tensor::zeros(input_shape);
    for (plane, &g) in gi.data_mut().chunks_mut(hw.max(1)).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Ok(gi)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of `[B,N]`.
pub fn softmax_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, n] = input.dims2("softmax_forward")?;
    input.ensure_finite(|| "softmax_forward input".into())?;
    let mut out = Tensor::zeros(input.shape());
    for (row, o) in input.data().chunks(n.max(1)).zip(out.data_mut().chunks_mut(n.max(1))) {
        softmax_row(row, o);
    }
    Ok(out)
}

/// Backward through softmax given its *output* `probs`.
pub fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.same_shape(probs, "softmax_backward")?;
    let [_, n] = probs.dims2("softmax_backward")?;
    let mut gi = Tensor::zeros(probs.shape());
    for ((g, p), out) in grad_out
        .data()
        .chunks(n.max(1))
        .zip(probs.data().chunks(n.max(1)))
        .zip(gi.data_mut().chunks_mut(n.max(1)))
    {
        let inner: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for ((o, &gj), &pj) in out.iter_mut().zip(g).zip(p) {
            *o = pj * (gj - inner);
        }
    }
    Ok(gi)
}

const LABEL_SUM_TOL: f64 = 1e-6;

fn check_ce_inputs<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<[usize; 2]> {
    let op = "cross_entropy_with_soft_labels";
    let dims = logits.dims2(op)?;
    if labels.shape() != logits.shape() {
        return Err(Error::shape(op, "labels vs logits", format!("{:?} vs {:?}", labels.shape(), logits.shape())));
    }
    logits.ensure_finite(|| format!("{op}: logits"))?;
    let k = dims[1].max(1);
    for (i, row) in labels.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > LABEL_SUM_TOL || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::Validation(format!(
                "{op}: label row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(dims)
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Mean over the batch of `-sum_k label_k * log_softmax(logits)_k`.
pub fn cross_entropy_with_soft_labels<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    let [b, k] = check_ce_inputs(logits, labels)?;
    let mut logp = vec![T::zero(); k];
    let mut total = T::zero();
    for (row, y) in logits.data().chunks(k.max(1)).zip(labels.data().chunks(k.max(1))) {
        log_softmax_row(row, &mut logp);
        total -= y.iter().zip(&logp).map(|(&a, &l)| a * l).sum::<T>();
    }
    Ok(total / T::from_f64(b as f64))
}

/// Gradient of [`cross_entropy_with_soft_labels`] w.r.t. the logits:
/// `(softmax(logits) - labels) / B`.
pub fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, _] = check_ce_inputs(logits, labels)?;
    let probs = softmax_forward(logits)?;
    let inv_b = T::one() / T::from_f64(b as f64);
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| (p - y) * inv_b)
        .collect();
    Tensor::from_vec(logits.shape(), data)
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, k] = t.dims2("argmax_rows")?;
    Ok(t.data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
