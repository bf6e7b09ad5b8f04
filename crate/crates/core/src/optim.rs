//! AdamW with decoupled weight decay, global-norm clipping and the step-halving schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{prefix}.{key}: {why}")));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        Ok(())
    }
}

/// `lr_init * 0.5^floor(epoch / period)`.
pub fn lr_schedule(epoch: u64, lr_init: f64, halving_period: u64) -> f64 {
    let halvings = epoch / halving_period.max(1);
    lr_init * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Gradients keyed by parameter name. Parameters outside the graph are absent.
pub type Gradients = BTreeMap<String, Tensor>;

/// Detached copies of the gradients of `store`'s parameters.
///
/// Leaf gradients in a `GradStore` still reference the forward graph; keeping
/// them (or anything computed from them) across steps would keep every graph alive.
pub fn collect_gradients(store: &ParamStore, grads: &GradStore) -> Gradients {
    store
        .vars()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.to_string(), g.detach())))
        .collect()
}

/// L2 norm over all gradient entries.
pub fn global_norm(grads: &Gradients) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in store.vars() {
            first.insert(name.to_string(), var.as_tensor().zeros_like()?);
            second.insert(name.to_string(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            cfg,
            step: 0,
            first,
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are left untouched, weight decay included.
    pub fn step(&mut self, store: &ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match (self.first.get_mut(name), self.second.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::invalid(format!("optimizer has no state for {name}"))),
            };
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let p = var.as_tensor();
            let decayed = (p * (1.0 - lr * weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moments keyed `m.<name>` / `v.<name>`, for checkpoints.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let m = self.first.iter().map(|(k, t)| (format!("m.{k}"), t.clone()));
        let v = self.second.iter().map(|(k, t)| (format!("v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (key, t) in state {
            let (slot, name) = if let Some(n) = key.strip_prefix("m.") {
                (&mut self.first, n)
            } else if let Some(n) = key.strip_prefix("v.") {
                (&mut self.second, n)
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {key}")));
            };
            let current = slot
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer entry for unknown parameter {name}")))?;
            if current.dims() != t.dims() {
                return Err(Error::Checkpoint(format!("optimizer entry {key} has shape {:?}", t.dims())));
            }
            *current = t.to_dtype(current.dtype())?;
        }
        if state.len() != self.first.len() + self.second.len() {
            return Err(Error::Checkpoint("optimizer state is incomplete".into()));
        }
        self.step = step;
        Ok(())
    }
}
