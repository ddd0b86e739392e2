//! Small neural-network toolkit on top of `candle-core`: a named parameter
//! store, functional ops with working gradients, and the layers the
//! generator, discriminator and frozen extractors are built from.

pub mod layers;
pub mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Every network runs in 64-bit on the CPU so replays are bitwise stable
/// and finite differences are meaningful.
pub const DTYPE: DType = DType::F64;
pub const DEVICE: Device = Device::Cpu;

/// Named trainable parameters, created with seeded initializers.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Var> {
        assert!(!self.vars.contains_key(name), "duplicate parameter {name}");
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &DEVICE)?;
        self.insert(name, t)
    }

    /// A draw from the store's stream in [-1, 1), for non-parameter state.
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.random_range(-1.0..1.0)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &DEVICE)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters from `tensors`; every parameter must be present
    /// with a matching shape.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(crate::Error::Checkpoint(format!(
                    "tensor {name}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    /// Copies every parameter value into a fresh map.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}
