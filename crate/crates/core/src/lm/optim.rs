use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::params::{Group, ModelParams};
use super::real::{cast, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f64,
    /// Decoupled weight decay, applied as `p -= lr * decay * p`.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for 0-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_frac * total as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / warmup as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        }
    }
}

/// One adaptive-moment update restricted to the trainable groups.
pub fn apply_update<T: Real>(params: &mut ModelParams<T>, grad: &[T], state: &mut AdamState<T>, cfg: &AdamConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t): (T, T) = (cast(b1), cast(b2));
    let (one_b1, one_b2): (T, T) = (cast(1.0 - b1), cast(1.0 - b2));
    let step_size: T = cast(lr / c1);
    let inv_sqrt_c2: T = cast(1.0 / c2.sqrt());
    let eps: T = cast(cfg.eps);
    let keep: T = cast(1.0 - lr * cfg.weight_decay);
    for g in Group::ALL {
        if !params.trainable.get(g) {
            continue;
        }
        for i in params.group_range(g) {
            let gi = grad[i];
            state.m[i] = b1t * state.m[i] + one_b1 * gi;
            state.v[i] = b2t * state.v[i] + one_b2 * gi * gi;
            let denom = state.v[i].sqrt() * inv_sqrt_c2 + eps;
            params.data[i] = keep * params.data[i] - step_size * state.m[i] / denom;
        }
    }
}

/// Loss, gradient and update for one prepared batch. `extra` may add an
/// auxiliary term: it receives the parameters and the gradient buffer and
/// returns its own loss contribution.
pub fn training_step<T: Real>(
    params: &mut ModelParams<T>,
    batch: &Batch,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
    extra: Option<&dyn Fn(&ModelParams<T>, &mut [T]) -> T>,
) -> Result<T> {
    let (mut loss, mut grad) = params.loss_and_grad(batch)?;
    if let Some(f) = extra {
        loss += f(params, &mut grad);
    }
    if !loss.is_finite() {
        let gnorm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!(
                "loss={loss:?} grad_norm={gnorm:?} targets={} lr={lr}",
                batch.targets.len()
            ),
        });
    }
    apply_update(params, &grad, state, cfg, lr);
    Ok(loss)
}
