use crate::error::{Error, Result};

use super::{ParamSet, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, cfg: &AdamConfig) -> Result<()> {
    if !params.has_grads() {
        return Err(Error::NoGradients);
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::of(cfg.lr), T::of(cfg.eps));
    for e in params.entries_mut().iter_mut().filter(|e| e.trainable) {
        e.step += 1;
        let t = e.step as i32;
        let c1 = one - T::of(cfg.beta1.powi(t));
        let c2 = one - T::of(cfg.beta2.powi(t));
        for (((p, &g), m), v) in e
            .value
            .data_mut()
            .iter_mut()
            .zip(&e.grad)
            .zip(e.m.iter_mut())
            .zip(e.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
