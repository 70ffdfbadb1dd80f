//! AdamW with decoupled weight decay and a linear warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcm::{MappingGrads, MappingParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// First and second moments, flattened in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn for_params(params: &MappingParams) -> Self {
        Self::new(params.num_params())
    }
}

/// `base_lr · min(1, step / warmup_steps)`.
pub fn lr_at_step(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

/// Scalar core of the update; `theta`, `grad`, `m`, `v` are parallel slices.
/// `t` is the 1-based step count after incrementing.
fn update_slice(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * cfg.weight_decay * theta[i];
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW update in place.
pub fn adamw_step(
    params: &mut MappingParams,
    grads: &MappingGrads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let flat = grads.flat();
    let n = params.num_params();
    if flat.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if flat.len() != n {
                flat.len()
            } else {
                state.m.len().min(state.v.len())
            },
            context: "optimizer update",
        });
    }
    if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient coordinate {i} at optimizer step {}",
            state.t + 1
        )));
    }
    state.t += 1;
    let mut off = 0;
    for theta in params.tensors_mut() {
        let len = theta.len();
        let r = off..off + len;
        update_slice(
            theta,
            &flat[r.clone()],
            &mut state.m[r.clone()],
            &mut state.v[r],
            state.t,
            lr,
            cfg,
        );
        off += len;
    }
    Ok(())
}
