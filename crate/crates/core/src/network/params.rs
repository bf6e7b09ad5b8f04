use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors plus non-trainable buffers (normalisation running stats).
///
/// Names are hierarchical, dot separated, and iteration order is sorted by name.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Mutex<Tensor>>,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(|k| k.as_str())
    }

    pub fn buffer(&self, name: &str) -> Option<Tensor> {
        self.buffers.get(name).map(|b| b.lock().unwrap().clone())
    }

    pub fn set_buffer(&self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name}")))?;
        let mut guard = slot.lock().unwrap();
        if guard.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "buffer {name}: expected shape {:?}, found {:?}",
                guard.dims(),
                value.dims()
            )));
        }
        *guard = value.to_dtype(self.dtype)?;
        Ok(())
    }

    pub(crate) fn buffer_slot(&self, name: &str) -> &Mutex<Tensor> {
        &self.buffers[name]
    }

    /// Overwrites a trainable tensor in place, keeping its identity for autograd.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Deep copy of every parameter and buffer value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        for (k, b) in &self.buffers {
            out.insert(format!("buffer:{k}"), b.lock().unwrap().copy()?);
        }
        Ok(out)
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in snapshot {
            match k.strip_prefix("buffer:") {
                Some(b) => self.set_buffer(b, t.clone())?,
                None => self.assign(k, t)?,
            }
        }
        Ok(())
    }
}

/// Creates parameters with seeded fan-in uniform initialisation.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl ParamBuilder {
    pub fn new(device: &Device, dtype: DType, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore {
                device: device.clone(),
                dtype,
                vars: BTreeMap::new(),
                buffers: BTreeMap::new(),
            },
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.store.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &self.store.device)?
            .to_dtype(self.store.dtype)?;
        self.store.buffers.insert(name.to_string(), Mutex::new(t));
        Ok(())
    }
}
