//! Named parameter storage.
//!
//! Trainable parameters are candle [`Var`]s so backprop tracks them. Frozen
//! parameters are handed to layers as detached tensors: the autograd graph
//! never records them, so their gradient is structurally zero and no optimizer
//! can reach them.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn { fan_in: usize },
}

struct Inner {
    trainable: BTreeMap<String, Var>,
    frozen: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                trainable: BTreeMap::new(),
                frozen: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            prefix: String::new(),
            frozen: false,
        }
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .trainable
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn frozen(&self) -> Vec<(String, Tensor)> {
        self.lock()
            .frozen
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn trainable_var(&self, name: &str) -> Option<Var> {
        self.lock().trainable.get(name).cloned()
    }

    /// SHA-256 over names and values of every parameter whose name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<String> {
        let inner = self.lock();
        let mut hasher = Sha256::new();
        let frozen = inner.frozen.iter().map(|(k, v)| (k, v.as_tensor().clone()));
        let trainable = inner.trainable.iter().map(|(k, v)| (k, v.as_tensor().clone()));
        let mut all: Vec<_> = frozen.chain(trainable).filter(|(k, _)| k.starts_with(prefix)).collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        for (name, t) in all {
            hasher.update(name.as_bytes());
            let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Overwrite parameter values by name. Every name must already exist with a matching shape.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, value) in values {
            let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
            let var = inner
                .trainable
                .get(name)
                .or_else(|| inner.frozen.get(name))
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if var.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: have {:?}, got {:?}",
                    var.shape(),
                    value.shape()
                )));
            }
            // Layers hold tensors sharing this storage, so the write is visible to them.
            var.set(&value)?;
        }
        Ok(())
    }
}

/// Scoped handle used by layer constructors, in the spirit of a var builder.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
    frozen: bool,
}

impl Params {
    pub fn pp(&self, name: &str) -> Params {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Params {
            store: self.store.clone(),
            prefix,
            frozen: self.frozen,
        }
    }

    /// Parameters created below this handle are frozen constants.
    pub fn frozen(&self) -> Params {
        Params {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = self.store.lock();
        if inner.trainable.contains_key(&full) || inner.frozen.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        if self.frozen {
            // Detached: shares storage with the var but is never recorded by autograd.
            let t = var.as_tensor().detach();
            inner.frozen.insert(full, var);
            Ok(t)
        } else {
            let t = var.as_tensor().clone();
            inner.trainable.insert(full, var);
            Ok(t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = ParamStore::new(7, DType::F32, Device::Cpu);
        let b = ParamStore::new(7, DType::F32, Device::Cpu);
        let ta = a.root().get("w", &[3, 4], Init::Normal { std: 0.02 }).unwrap();
        let tb = b.root().get("w", &[3, 4], Init::Normal { std: 0.02 }).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn frozen_params_are_not_vars() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.root().frozen().pp("enc").get("w", &[2], Init::Ones).unwrap();
        s.root().pp("head").get("w", &[2], Init::Zeros).unwrap();
        assert_eq!(s.frozen().len(), 1);
        assert_eq!(s.trainable().len(), 1);
        assert_eq!(s.trainable()[0].0, "head.w");
    }

    #[test]
    fn assign_updates_shared_tensor() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        let t = s.root().get("w", &[2], Init::Zeros).unwrap();
        let f = s.root().frozen().get("f", &[2], Init::Zeros).unwrap();
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(&[1f32, 2.], &Device::Cpu).unwrap());
        m.insert("f".to_string(), Tensor::new(&[3f32, 4.], &Device::Cpu).unwrap());
        s.assign(&m).unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![1., 2.]);
        assert_eq!(f.to_vec1::<f32>().unwrap(), vec![3., 4.]);
        assert!(s.assign(&BTreeMap::from([("nope".to_string(), t.clone())])).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.root().pp("a").get("w", &[2], Init::Zeros).unwrap();
        let before = s.checksum("a").unwrap();
        s.trainable_var("a.w").unwrap().set(&Tensor::new(&[1f32, 0.], &Device::Cpu).unwrap()).unwrap();
        assert_ne!(before, s.checksum("a").unwrap());
    }
}
