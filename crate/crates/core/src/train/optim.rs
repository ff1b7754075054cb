use serde::{Deserialize, Serialize};

use crate::error::{FeverError, Result};
use crate::ndgrad::{Array, Float};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.005,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FeverError::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FeverError::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        Ok(())
    }
}

/// One SGD step with (optionally Nesterov) momentum:
/// `v <- mu*v + g`, then `p <- p - lr*(g + mu*v)` or `p <- p - lr*v`.
///
/// Every gradient is checked before anything is written, so a non-finite
/// gradient leaves parameters and velocity untouched.
pub fn sgd_nesterov_step<T: Float>(
    params: &mut [Array<T>],
    grads: &[Array<T>],
    velocity: &mut [Array<T>],
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(FeverError::Invariant(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(FeverError::Shape {
                op: "sgd_nesterov_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(FeverError::numeric(format!("gradient of parameter {i}")));
        }
    }
    let lr = T::of(cfg.lr);
    let mu = T::of(cfg.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            let step = if cfg.nesterov { gi + mu * *vi } else { *vi };
            *pi -= lr * step;
        }
    }
    Ok(())
}
