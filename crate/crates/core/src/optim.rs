//! AdamW with decoupled weight decay, plus the serializable training state.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct Moments<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Optimizer and loop state; everything needed to resume a run bit-exactly.
pub struct TrainState<S: Scalar> {
    pub epoch: u32,
    pub step: u64,
    pub best_metric: f64,
    pub epochs_since_best: u32,
    pub moments: BTreeMap<String, Moments<S>>,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            best_metric: f64::NEG_INFINITY,
            epochs_since_best: 0,
            moments: BTreeMap::new(),
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One decoupled-weight-decay AdamW step over every trainable parameter:
///
/// ```text
/// m = b1 m + (1-b1) g         v = b2 v + (1-b2) g^2
/// m_hat = m / (1-b1^t)        v_hat = v / (1-b2^t)
/// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
/// ```
///
/// Frozen tensors are untouched; the decay term uses the pre-update value.
pub fn adamw_step<S: Scalar>(
    store: &ParameterStore<S>,
    state: &mut TrainState<S>,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
    let inv_bias1 = S::from_f64(1.0 / bias1);
    let inv_bias2 = S::from_f64(1.0 / bias2);
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.eps);
    let decay = S::from_f64(cfg.lr * cfg.weight_decay);

    for (name, param) in store.iter() {
        if !param.requires_grad() {
            continue;
        }
        let grad = param
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} has no gradient")))?;
        let numel = param.numel();
        let slot = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![S::zero(); numel],
            v: vec![S::zero(); numel],
        });
        if slot.m.len() != numel {
            return Err(Error::Contract(format!(
                "moment shape for {name:?} does not match parameter"
            )));
        }
        param.update_data(|theta| {
            for i in 0..numel {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
                let m_hat = slot.m[i] * inv_bias1;
                let v_hat = slot.v[i] * inv_bias2;
                theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps)) - decay * theta[i];
            }
        });
    }
    Ok(())
}
