//! Named registry of trainable parameters with a seeded generator.
//!
//! All randomness used by initialization and dropout flows through the
//! store's single ChaCha stream, so a fixed seed plus a fixed registration
//! and forward order reproduces runs bit-exactly.

use std::cell::{RefCell, RefMut};
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Default weight initialization scale: Normal(0, 0.02^2), the usual
/// transformer convention. Biases are zero-initialized.
pub const INIT_STD: f64 = 0.02;

/// Weight initialization policy for a store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Fixed standard deviation for every weight.
    Gaussian(f64),
    /// Per-tensor 1/sqrt(fan_in); keeps activations and score heads at a
    /// healthy scale when the step budget is small.
    FanIn,
}

pub struct ParameterStore<S: Scalar> {
    params: BTreeMap<String, DenseTensor<S>>,
    seed: u64,
    rng: RefCell<ChaCha8Rng>,
    weight_init: WeightInit,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            seed,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            weight_init: WeightInit::Gaussian(INIT_STD),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight_init(&self) -> WeightInit {
        self.weight_init
    }

    pub fn set_weight_init(&mut self, init: WeightInit) {
        self.weight_init = init;
    }

    /// Registers a Gaussian-initialized weight tensor under the store's
    /// initialization policy (fan-in is the last dimension).
    pub fn init_weight(&mut self, name: &str, dims: Vec<usize>) -> Result<DenseTensor<S>> {
        let std = match self.weight_init {
            WeightInit::Gaussian(s) => s,
            WeightInit::FanIn => {
                let fan_in = *dims.last().unwrap_or(&1) as f64;
                1.0 / fan_in.sqrt()
            }
        };
        let numel: usize = dims.iter().product();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data: Vec<S> = {
            let mut rng = self.rng.borrow_mut();
            (0..numel)
                .map(|_| S::from_f64(normal.sample(&mut *rng)))
                .collect()
        };
        let tensor = DenseTensor::parameter(dims, data)?;
        self.insert(name, tensor.clone())?;
        Ok(tensor)
    }

    /// Registers a zero-initialized bias tensor.
    pub fn init_bias(&mut self, name: &str, dims: Vec<usize>) -> Result<DenseTensor<S>> {
        let numel: usize = dims.iter().product();
        let tensor = DenseTensor::parameter(dims, vec![S::zero(); numel])?;
        self.insert(name, tensor.clone())?;
        Ok(tensor)
    }

    pub fn insert(&mut self, name: &str, tensor: DenseTensor<S>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Registry(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor<S>> {
        self.params.get(name)
    }

    /// Parameters in deterministic (name-sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseTensor<S>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    pub(crate) fn rng_mut(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    /// Position in the ChaCha stream, for checkpointing.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.borrow().get_word_pos()
    }

    pub fn set_rng_word_pos(&self, pos: u128) {
        self.rng.borrow_mut().set_word_pos(pos);
    }

    /// Plain-data snapshot (name, dims, values) in sorted order; `Send`,
    /// used for checkpointing and rebuilding stores on worker threads.
    pub fn to_raw(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), t.dims().to_vec(), t.to_vec()))
            .collect()
    }

    /// Overwrites existing parameter values from a raw snapshot. Every
    /// snapshot entry must match a registered parameter of the same shape,
    /// and every registered parameter must be covered.
    pub fn load_raw(&self, raw: &[(String, Vec<usize>, Vec<S>)]) -> Result<()> {
        if raw.len() != self.params.len() {
            return Err(Error::Registry(format!(
                "snapshot has {} parameters, store has {}",
                raw.len(),
                self.params.len()
            )));
        }
        for (name, dims, values) in raw {
            let tensor = self
                .params
                .get(name)
                .ok_or_else(|| Error::Registry(format!("unknown parameter {name:?} in snapshot")))?;
            if tensor.dims() != dims.as_slice() {
                return Err(Error::Registry(format!(
                    "parameter {name:?} shape mismatch: store {:?}, snapshot {dims:?}",
                    tensor.dims()
                )));
            }
            tensor.set_data(values.clone())?;
        }
        Ok(())
    }
}
