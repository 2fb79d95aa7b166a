use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-parameter moment buffers and step counts.
///
/// Only parameters present in the gradient map are touched, so a parameter
/// that is absent from a step keeps both its value and its moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.step)
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        // Validate everything before mutating anything.
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Data(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    name.as_str(),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if let Some(i) = g.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} for '{name}' at {:?}",
                    g.data()[i],
                    g.unravel(i)
                )));
            }
        }

        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                step: 0,
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            for (((w, &gv), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
