use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moment estimates are keyed by
/// parameter name so they can be checkpointed and restored.
pub struct AdamW<F: Real> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<(String, &mut Param<F>)>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = F::from_f64_lossy(c.learning_rate);
        let decay = F::from_f64_lossy(1.0 - c.learning_rate * c.weight_decay);
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let bc1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = F::from_f64_lossy(c.eps);
        let one = F::one();
        for (name, p) in params {
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *w = *w * decay - lr * update;
                });
        }
    }

    /// Moment tensors as `(name.m, tensor)` / `(name.v, tensor)` pairs.
    pub fn state(&self) -> Vec<(String, &ArrayD<F>)> {
        self.moments
            .iter()
            .flat_map(|(n, (m, v))| [(format!("{n}.m"), m), (format!("{n}.v"), v)])
            .collect()
    }

    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>) {
        self.step = step;
        self.moments = moments;
    }
}
