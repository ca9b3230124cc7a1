//! Adam with inspectable moment buffers so training can resume bit-exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Slot {
    var: Var,
    m: Var,
    v: Var,
}

/// Adam over a named parameter set.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    slots: BTreeMap<String, Slot>,
    steps: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in params {
            let m = Var::zeros(var.shape(), var.dtype(), var.device())?;
            let v = Var::zeros(var.shape(), var.dtype(), var.device())?;
            slots.insert(name, Slot { var, m, v });
        }
        Ok(Self {
            config,
            slots,
            steps: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.apply(|_, var| grads.get(var.as_tensor()).cloned())
    }

    /// As [`Adam::step`] with gradients keyed by parameter name.
    pub fn step_named(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.apply(|name, _| grads.get(name).cloned())
    }

    fn apply(&mut self, grad_of: impl Fn(&str, &Var) -> Option<Tensor>) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, slot) in &self.slots {
            let Some(g) = grad_of(name, &slot.var) else {
                continue;
            };
            let m = ((slot.m.as_tensor() * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((slot.v.as_tensor() * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            if !next.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite() {
                return Err(Error::Numeric(format!("non-finite update for {name}")));
            }
            slot.m.set(&m)?;
            slot.v.set(&v)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment buffers keyed `"<param>.m"` / `"<param>.v"`, plus the step count.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, u64) {
        let mut out = BTreeMap::new();
        for (name, slot) in &self.slots {
            out.insert(format!("{name}.m"), slot.m.as_tensor().copy().expect("cpu copy"));
            out.insert(format!("{name}.v"), slot.v.as_tensor().copy().expect("cpu copy"));
        }
        (out, self.steps)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        if state.len() != 2 * self.slots.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} buffers, expected {}",
                state.len(),
                2 * self.slots.len()
            )));
        }
        for (name, slot) in &self.slots {
            for (suffix, buf) in [("m", &slot.m), ("v", &slot.v)] {
                let key = format!("{name}.{suffix}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer buffer {key}")))?;
                if t.dims() != buf.dims() {
                    return Err(Error::Checkpoint(format!("optimizer buffer {key} has wrong shape")));
                }
                buf.set(&t.to_dtype(buf.dtype())?)?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
