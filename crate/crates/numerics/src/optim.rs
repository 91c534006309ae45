//! AdamW with decoupled weight decay, cosine learning-rate schedule, and
//! global-norm gradient clipping.

use crate::error::{NumericsError, Result};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// One update of every non-frozen parameter using the accumulated
    /// gradients; advances the store's step counter.
    pub fn step(&self, ps: &mut ParamStore, lr: f64) {
        let t = ps.step() + 1;
        ps.set_step(t);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let (value, grad, m, v, frozen) = ps.adam_parts(id);
            if frozen {
                continue;
            }
            let decay = 1.0 - lr * self.weight_decay;
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Functional form of [`AdamW::step`].
pub fn adamw_step(ps: &mut ParamStore, lr: f64, weight_decay: f64, betas: (f64, f64)) {
    AdamW {
        weight_decay,
        beta1: betas.0,
        beta2: betas.1,
        eps: 1e-8,
    }
    .step(ps, lr);
}

/// `base · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: u64, total: u64, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(NumericsError::Config("cosine schedule needs total > 0".into()));
    }
    let s = step.min(total) as f64 / total as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, max_norm: f64) -> f64 {
    let n = ps.grad_norm();
    if max_norm > 0.0 && n > max_norm {
        ps.scale_grads(max_norm / n);
    }
    n
}
