use std::collections::BTreeMap;

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBuffers {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied to this parameter (drives bias correction).
    pub t: u64,
}

/// Adam optimizer state. Parameters that never received a gradient have no buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, MomentBuffers>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&MomentBuffers> {
        self.moments.get(&id)
    }

    pub fn iter_moments(&self) -> impl Iterator<Item = (ParamId, &MomentBuffers)> {
        self.moments.iter().map(|(k, v)| (*k, v))
    }

    pub(crate) fn restore(&mut self, step: u64, moments: BTreeMap<ParamId, MomentBuffers>) {
        self.step = step;
        self.moments = moments;
    }

    /// One bias-corrected Adam update of every non-frozen parameter in `grads`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f64>>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        for (id, g) in grads {
            if id.0 >= store.len() || g.len() != store.values(*id).len() {
                return Err(Error::contract(format!(
                    "gradient for parameter {} has {} entries, parameter has {}",
                    id.0,
                    g.len(),
                    if id.0 < store.len() { store.values(*id).len() } else { 0 }
                )));
            }
            if let Some(mb) = self.moments.get(id) {
                if mb.m.len() != g.len() {
                    return Err(Error::contract("moment buffer shape mismatch"));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let mb = self.moments.entry(*id).or_insert_with(|| MomentBuffers { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            mb.t += 1;
            let c1 = 1.0 - beta1.powi(mb.t as i32);
            let c2 = 1.0 - beta2.powi(mb.t as i32);
            let p = store.values_mut(*id);
            for i in 0..g.len() {
                mb.m[i] = beta1 * mb.m[i] + (1.0 - beta1) * g[i];
                mb.v[i] = beta2 * mb.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = mb.m[i] / c1;
                let vhat = mb.v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
