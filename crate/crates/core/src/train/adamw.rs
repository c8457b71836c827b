//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Moment state persists across steps; learning rate is passed per step so
/// schedules stay outside the optimizer.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.9, 0.999, 1e-8, 1e-4)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        AdamW { beta1, beta2, eps, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * mhat / (sqrt(vhat) + eps) + lr * wd * p`,
    /// with bias-corrected first and second moments.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::invalid("adamw", format!("missing gradient for {name}")))?;
            let p = store.get_mut(&name).expect("name from store");
            if g.len() != p.data.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: gradient length {} vs parameter {}", g.len(), p.data.len()),
                ));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps) + lr * self.weight_decay * p.data[i];
            }
        }
        Ok(())
    }
}
