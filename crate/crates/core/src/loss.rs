//! Objectives: multi-label cross entropy, per-level stream losses, the
//! self-distillation distance, and the weighted total.

use crate::error::{Error, Result};
use crate::hierarchy::PathIndices;
use crate::ops;
use crate::scalar::Scalar;
use crate::scores::ScoreSheet;
use crate::tensor::DenseTensor;

/// Objective coefficients; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta_t: f64,
    pub beta_nt: f64,
    pub beta_distill: f64,
    pub beta_level1: f64,
    pub beta_level2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_t: 1.0,
            beta_nt: 1.0,
            beta_distill: 1.0,
            beta_level1: 1.0,
            beta_level2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        LossWeights {
            beta_t: cfg.beta_t,
            beta_nt: cfg.beta_nt,
            beta_distill: cfg.beta_distill,
            beta_level1: cfg.beta_level1,
            beta_level2: cfg.beta_level2,
        }
    }
}

/// Multi-label cross entropy over refined scores:
/// `log(1 + sum_neg exp(s)) + log(1 + sum_pos exp(-s))`, pushing positive
/// scores above zero and negative scores below.
pub fn multilabel_ce<S: Scalar>(
    refined_scores: &DenseTensor<S>,
    positives: &[usize],
) -> Result<DenseTensor<S>> {
    let n = refined_scores.numel();
    if let Some(&bad) = positives.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!(
            "positive index {bad} outside {n} labels"
        )));
    }
    let mut is_positive = vec![false; n];
    for &i in positives {
        is_positive[i] = true;
    }
    let pos: Vec<usize> = (0..n).filter(|&i| is_positive[i]).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| !is_positive[i]).collect();
    let mut loss = DenseTensor::scalar(S::zero());
    if !neg.is_empty() {
        let neg_scores = ops::gather(refined_scores, &neg)?;
        loss = ops::add(&loss, &ops::log1p_sum_exp(&neg_scores)?)?;
    }
    if !pos.is_empty() {
        let pos_scores = ops::scale(&ops::gather(refined_scores, &pos)?, -1.0)?;
        loss = ops::add(&loss, &ops::log1p_sum_exp(&pos_scores)?)?;
    }
    Ok(loss)
}

/// Per-level cross entropy combined with the level weights, on refined
/// scores. Level-1 positives are the parents on any path, level-2 the
/// children.
pub fn stream_loss<S: Scalar>(
    sheet: &ScoreSheet<S>,
    paths: &PathIndices,
    weights: &LossWeights,
) -> Result<DenseTensor<S>> {
    let j1 = multilabel_ce(&sheet.refined_level1, &paths.level1)?;
    let j2 = multilabel_ce(&sheet.refined_level2, &paths.level2)?;
    ops::add(
        &ops::scale(&j1, weights.beta_level1)?,
        &ops::scale(&j2, weights.beta_level2)?,
    )
}

/// Per-video Euclidean distances between the two streams' refined scores,
/// one scalar per level. Gradients flow into both streams.
pub fn distill_distances<S: Scalar>(
    temporal: &ScoreSheet<S>,
    nontemporal: &ScoreSheet<S>,
) -> Result<(DenseTensor<S>, DenseTensor<S>)> {
    let dist = |a: &DenseTensor<S>, b: &DenseTensor<S>| -> Result<DenseTensor<S>> {
        if a.dims() != b.dims() {
            return Err(Error::dimension(
                "distill",
                format!("score dims {:?} vs {:?}", a.dims(), b.dims()),
            ));
        }
        let diff = ops::sub(a, b)?;
        ops::sqrt(&ops::sum_all(&ops::mul(&diff, &diff)?)?)
    };
    Ok((
        dist(&temporal.refined_level1, &nontemporal.refined_level1)?,
        dist(&temporal.refined_level2, &nontemporal.refined_level2)?,
    ))
}

/// Batch distillation loss: per level, the mean over videos of the
/// per-video Euclidean distance, combined with the level weights.
pub fn distill_loss<S: Scalar>(
    pairs: &[(&ScoreSheet<S>, &ScoreSheet<S>)],
    weights: &LossWeights,
) -> Result<DenseTensor<S>> {
    if pairs.is_empty() {
        return Err(Error::Contract("distill_loss over an empty batch".into()));
    }
    let mut l1_sum = DenseTensor::scalar(S::zero());
    let mut l2_sum = DenseTensor::scalar(S::zero());
    for (t, nt) in pairs {
        let (d1, d2) = distill_distances(t, nt)?;
        l1_sum = ops::add(&l1_sum, &d1)?;
        l2_sum = ops::add(&l2_sum, &d2)?;
    }
    let inv = 1.0 / pairs.len() as f64;
    ops::add(
        &ops::scale(&l1_sum, weights.beta_level1 * inv)?,
        &ops::scale(&l2_sum, weights.beta_level2 * inv)?,
    )
}

/// Final objective `beta_t J_t + beta_nt J_nt + beta_distill J_distill`.
pub fn total_objective<S: Scalar>(
    j_temporal: &DenseTensor<S>,
    j_nontemporal: &DenseTensor<S>,
    j_distill: &DenseTensor<S>,
    weights: &LossWeights,
) -> Result<DenseTensor<S>> {
    let t = ops::scale(j_temporal, weights.beta_t)?;
    let nt = ops::scale(j_nontemporal, weights.beta_nt)?;
    let d = ops::scale(j_distill, weights.beta_distill)?;
    ops::add(&ops::add(&t, &nt)?, &d)
}
