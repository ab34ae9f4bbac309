use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParameterStore};
use crate::{NeuralError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moments and the step counter live in the
/// [`ParameterStore`] so they travel with checkpoints.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config }
    }

    /// Applies one update. Every parameter in the store must have a gradient.
    pub fn step(&self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            match grads.get(id) {
                None => {
                    return Err(NeuralError::Contract(format!(
                        "missing gradient for `{}`",
                        store.path(id)
                    )))
                }
                Some(g) if g.shape() != store.value(id).shape() => {
                    return Err(NeuralError::Contract(format!(
                        "gradient shape {:?} for `{}` of shape {:?}",
                        g.shape(),
                        store.path(id),
                        store.value(id).shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let t = store.increment_step() as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let (value, m, v) = store.adam_slots(id);
            let (vals, ms, vs) = (value.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi + c.weight_decay * vals[i];
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * gi;
                vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                vals[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
