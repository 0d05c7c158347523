//! Adam with bias correction and a polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::nets::SegNet;
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `base * (1 - iteration / total)^power`.
pub fn poly_lr(base: f64, iteration: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (iteration.min(total) as f64) / total as f64;
    base * (1.0 - frac).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first: SegNet<T>,
    pub second: SegNet<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &SegNet<T>) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update of `params` against `grads`.
///
/// The input standardization is left untouched. Non-finite gradients abort
/// before any parameter changes.
pub fn adam_step<T: Real>(params: &mut SegNet<T>, grads: &SegNet<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != state.first.dims() {
        return Err(Error::Contract("optimizer shapes do not match the parameters".into()));
    }
    if grads.tensors().iter().any(|t| t.iter().any(|g| !g.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient at optimizer step {}", state.step + 1)));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - BETA1.powi(t);
    let correction2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (one_b1, one_b2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
    let step_size = T::of(lr / correction1);
    let inv_c2 = T::of(1.0 / correction2);
    let eps = T::of(EPSILON);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            p[i] = p[i] - step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}
