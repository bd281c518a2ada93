//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] and are initialized from a seeded
//! ChaCha stream in construction order, so a model built twice from the same
//! seed is bit-identical.

mod layers;
mod optim;
mod recurrent;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub use layers::{Conv2d, ConvTranspose2d, Gate, Linear};
pub use optim::{adam, Adagrad, Adam};
pub use recurrent::{bi_gru, bi_lstm, BiRnn, GruCell, LstmCell, RecurrentCell};

use crate::{Error, Result};

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
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

    pub fn vars(&self) -> Vec<Var> {
        self.vars.lock().unwrap().values().cloned().collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    fn register(&self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let mut vars = self.vars.lock().unwrap();
        if vars.insert(name.clone(), var).is_some() {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        Ok(tensor)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> = self
            .named_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites every registered parameter with the values stored at `path`.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().unwrap();
        if loaded.len() != vars.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} tensors, model has {}",
                path.display(),
                loaded.len(),
                vars.len()
            )));
        }
        for (name, var) in vars.iter() {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies parameter values from another store with the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let src = other.named_vars();
        let vars = self.vars.lock().unwrap();
        for (name, v) in src {
            let dst = vars
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            dst.set(&v.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Hierarchical view into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = self.store.rng.lock().unwrap();
            (0..n).map(|_| dist.sample(&mut *rng)).collect()
        } else {
            vec![0.0; n]
        };
        self.store.register(self.full(name), values, shape)
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.uniform(name, shape, 0.0)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.store.register(self.full(name), vec![value; n], shape)
    }
}

/// Independent ChaCha stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tensor of standard-normal draws taken from `rng` in row-major order.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Numerically stable logistic function with a well-behaved gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let s = ParamStore::new(seed, DType::F64);
            let root = s.root();
            root.pp("a").uniform("w", &[3, 4], 0.5).unwrap();
            root.pp("b").uniform("w", &[2], 0.5).unwrap();
            s
        };
        let (a, b, c) = (build(1), build(1), build(2));
        let flat = |s: &ParamStore| -> Vec<f64> {
            s.vars()
                .iter()
                .flat_map(|v| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        assert_eq!(a.num_params(), 14);
        let names: Vec<_> = a.named_vars().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a.w", "b.w"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(0, DType::F32);
        s.root().zeros("x", &[1]).unwrap();
        assert!(s.root().zeros("x", &[1]).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let a = ParamStore::new(3, DType::F32);
        a.root().uniform("w", &[5, 2], 1.0).unwrap();
        a.save(&path).unwrap();
        let b = ParamStore::new(4, DType::F32);
        b.root().uniform("w", &[5, 2], 1.0).unwrap();
        b.load(&path).unwrap();
        let get = |s: &ParamStore| s.vars()[0].as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(get(&a), get(&b));
        let c = ParamStore::new(4, DType::F32);
        c.root().uniform("w", &[2, 5], 1.0).unwrap();
        assert!(c.load(&path).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, 0.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }
}
