//! Named parameter storage with seeded, order-independent initialization.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// Kaiming-uniform style bound for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

/// Parameters keyed by dotted path. Each parameter draws its initial values
/// from a stream derived from `(seed, name)`, so construction order never
/// changes the result.
pub struct ParamStore {
    vars: VarMap,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .field("params", &self.num_params())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: VarMap::new(),
            dtype,
            device: device.clone(),
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut data = self.vars.data().lock().expect("param lock poisoned");
        if let Some(v) = data.get(name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: stored {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self.init_tensor(name, shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let mut r = rng::stream(self.seed, &[rng::tag(name)]);
                (0..n).map(|_| r.random_range(-bound..=bound)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let data = self.vars.data().lock().expect("param lock poisoned");
        let mut v: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every stored parameter with the tensor of the same name.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let src = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Copies every parameter that `other` also has.
    pub fn copy_from(&self, other: &ParamStore) -> Result<usize> {
        let theirs: HashMap<String, Tensor> = other
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        let mut copied = 0;
        for (name, var) in self.vars() {
            if let Some(src) = theirs.get(&name) {
                var.set(&src.to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Adds seeded Gaussian noise of standard deviation `scale` to every
    /// parameter, including zero-initialized ones.
    pub fn perturb(&self, seed: u64, scale: f64) -> Result<()> {
        for (name, var) in self.vars() {
            let mut r = rng::stream(seed, &[rng::tag(&name)]);
            let noise = rng::normal_tensor(&mut r, var.dims(), self.dtype, &self.device)?;
            var.set(&(var.as_tensor() + (noise * scale)?)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_does_not_depend_on_creation_order() {
        let a = ParamStore::new(3, DType::F64, &Device::Cpu);
        let b = ParamStore::new(3, DType::F64, &Device::Cpu);
        let a1 = a.get("x.w", &[4], Init::Uniform(1.0)).unwrap();
        let _ = a.get("y.w", &[4], Init::Uniform(1.0)).unwrap();
        let _ = b.get("y.w", &[4], Init::Uniform(1.0)).unwrap();
        let b1 = b.get("x.w", &[4], Init::Uniform(1.0)).unwrap();
        assert_eq!(a1.to_vec1::<f64>().unwrap(), b1.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn repeated_get_returns_same_parameter() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let root = s.root().pp("layer");
        root.get("w", &[2, 2], Init::Ones).unwrap();
        root.get("w", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(s.num_params(), 4);
        assert!(root.get("w", &[4], Init::Ones).is_err());
    }
}
