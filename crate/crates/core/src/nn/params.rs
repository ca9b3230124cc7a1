//! Named, deterministically initialized parameter storage.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Owns the trainable variables of one sub-network family.
///
/// Initial values depend only on the store seed and the parameter name, so
/// construction order never changes a model.
#[derive(Debug)]
pub struct VarStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
    frozen: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { gain: f64, fan_in: usize },
    Const(f64),
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            seed,
            frozen: false,
        }
    }

    /// Subsequent module construction sees detached tensors: no gradient is
    /// ever recorded for these parameters.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    fn get_or_init(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
        } else {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Const(c) => vec![c; n],
                Init::Scaled { gain, fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
                    let std = gain / (fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            self.vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        let var = &self.vars[&name];
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        if self.frozen {
            return Vec::new();
        }
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Current values, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every variable from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = values
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {key}: checkpoint {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        let expected = self.vars.len();
        let provided = values.keys().filter(|k| k.starts_with(prefix)).count();
        if provided != expected {
            return Err(Error::Checkpoint(format!(
                "{prefix}: checkpoint has {provided} parameters, model has {expected}"
            )));
        }
        Ok(())
    }

    /// Flattened copy of all values, in name order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_params());
        for v in self.vars.values() {
            out.extend(v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Prefix-scoped view used while constructing modules.
pub struct ParamBuilder<'a> {
    store: &'a mut VarStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(full, shape, init)
    }
}
