//! SGD with heavy-ball momentum and per-layer gradient scales.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{Network, ParamKey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub step_size: f64,
    pub momentum: f64,
    /// L2-coupled: added to the gradient before scaling and momentum.
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            step_size: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// `g ← s·(∇ + λp)`, `v ← μ·v + g`, `p ← p − η·v`, where `s` is the
/// gradient scale of the parameter's layer.
#[derive(Debug, Clone, Default)]
pub struct SgdMomentum {
    pub config: SgdConfig,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(config: SgdConfig) -> Self {
        SgdMomentum {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update using the gradients of the latest backward pass.
    /// `grad_scales` holds one factor per trainable layer.
    pub fn step(&mut self, net: &mut Network, grad_scales: &[f64]) -> Result<()> {
        if !net.grads_ready() {
            return Err(Error::State(
                "optimizer step without gradients for the current batch".into(),
            ));
        }
        if grad_scales.len() != net.num_trainable() {
            return Err(Error::Config(format!(
                "{} gradient scales for {} trainable layers",
                grad_scales.len(),
                net.num_trainable()
            )));
        }
        let SgdConfig {
            step_size,
            momentum,
            weight_decay,
        } = self.config;
        let velocity = &mut self.velocity;
        net.visit_params_mut(|key, p, g| {
            let s = grad_scales[key.layer];
            let v = velocity.entry(key).or_insert_with(|| vec![0.0; p.len()]);
            for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                let gs = s * (gi + weight_decay * *pi);
                *vi = momentum * *vi + gs;
                *pi -= step_size * *vi;
            }
        });
        net.mark_grads_consumed();
        Ok(())
    }

    pub fn velocity(&self, key: ParamKey) -> Option<&[f64]> {
        self.velocity.get(&key).map(Vec::as_slice)
    }

    /// Zero the momentum of a whole parameter tensor.
    pub fn reset(&mut self, key: ParamKey) {
        if let Some(v) = self.velocity.get_mut(&key) {
            v.fill(0.0);
        }
    }

    /// Zero the momentum of selected entries of one parameter tensor.
    pub fn reset_entries(&mut self, key: ParamKey, entries: impl IntoIterator<Item = usize>) {
        if let Some(v) = self.velocity.get_mut(&key) {
            for i in entries {
                v[i] = 0.0;
            }
        }
    }

    pub fn velocity_bits(&self) -> impl Iterator<Item = u64> + '_ {
        self.velocity.values().flatten().map(|v| v.to_bits())
    }
}
