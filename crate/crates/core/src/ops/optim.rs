//! SGD with momentum and L2 weight decay, plus the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One in-place SGD update:
/// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: SgdConfig,
) -> Result<()> {
    param.same_shape(grad, "sgd_step")?;
    param.same_shape(velocity, "sgd_step")?;
    let (lr, mu, wd) = (T::from_f64(cfg.lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// `base_lr * 0.5 * (1 + cos(pi * epoch / max_epoch))` for `0 <= epoch < max_epoch`.
pub fn cosine_lr(epoch: usize, max_epoch: usize, base_lr: f64) -> Result<f64> {
    if epoch >= max_epoch {
        return Err(Error::Range(format!("epoch {epoch} outside [0, {max_epoch})")));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * epoch as f64 / max_epoch as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 30, 0.05).unwrap(), 0.05);
        assert!((cosine_lr(5, 10, 0.2).unwrap() - 0.1).abs() < 1e-17);
        assert!((cosine_lr(25, 50, 1e-3).unwrap() - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(10, 10, 0.1).is_err());
    }

    #[test]
    fn cosine_strictly_decreases() {
        let lrs: Vec<f64> = (0..30).map(|e| cosine_lr(e, 30, 0.05).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = Tensor::<f64>::from_f64_slice(&[2], &[1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::from_f64_slice(&[2], &[0.5, 0.5]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &g, &mut v, cfg).unwrap();
        assert_eq!(p.data(), &[0.95, -1.05]);
        sgd_step(&mut p, &g, &mut v, cfg).unwrap();
        // v = 0.9 * 0.5 + 0.5
        assert!((p[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
    }
}
