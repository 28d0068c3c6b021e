//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-tensor first and second moments.
///
/// One step, for every parameter `p` with gradient `g` at step `t`:
///
/// ```text
/// p <- p - lr * wd * p                       (only where decay is enabled)
/// m <- b1 * m + (1 - b1) * g
/// v <- b2 * v + (1 - b2) * g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    decay: Vec<bool>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    /// `decay[i]` enables weight decay for the i-th tensor.
    pub fn new(config: AdamWConfig, sizes: &[usize], decay: Vec<bool>) -> Result<Self> {
        if sizes.len() != decay.len() {
            return Err(Error::Config("decay mask length differs from tensor count".into()));
        }
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {config:?}")));
        }
        Ok(AdamW {
            config,
            decay,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads for {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let shrink = T::lit(1.0 - c.lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::shape("adamw", format!("slot {i}: {} params, {} grads, {} state", p.len(), g.len(), m.len())));
            }
            let decay = self.decay[i] && c.weight_decay != 0.0;
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                if decay {
                    *w *= shrink;
                }
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
