//! Per-video label scores for both hierarchy levels.
//!
//! Basic scores come from a stream's head; refined scores compose the
//! hierarchy: a level-1 label keeps its basic score, a level-2 label adds
//! its parent's basic score to its own.

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub struct ScoreSheet<S: Scalar> {
    pub basic_level1: DenseTensor<S>,
    pub basic_level2: DenseTensor<S>,
    pub refined_level1: DenseTensor<S>,
    pub refined_level2: DenseTensor<S>,
}

impl<S: Scalar> ScoreSheet<S> {
    /// Builds the refined scores from basic per-level vectors, so the
    /// refinement identities hold by construction.
    pub fn from_basic(
        basic_level1: DenseTensor<S>,
        basic_level2: DenseTensor<S>,
        hierarchy: &LabelHierarchy,
    ) -> Result<Self> {
        if basic_level1.rank() != 1 || basic_level1.numel() != hierarchy.n_level1() {
            return Err(Error::dimension(
                "score_sheet",
                format!(
                    "level-1 scores {:?} vs {} labels",
                    basic_level1.dims(),
                    hierarchy.n_level1()
                ),
            ));
        }
        if basic_level2.rank() != 1 || basic_level2.numel() != hierarchy.n_level2() {
            return Err(Error::dimension(
                "score_sheet",
                format!(
                    "level-2 scores {:?} vs {} labels",
                    basic_level2.dims(),
                    hierarchy.n_level2()
                ),
            ));
        }
        let refined_level1 = basic_level1.clone();
        let parent_scores = ops::gather(&basic_level1, hierarchy.parent_indices())?;
        let refined_level2 = ops::add(&parent_scores, &basic_level2)?;
        Ok(ScoreSheet {
            basic_level1,
            basic_level2,
            refined_level1,
            refined_level2,
        })
    }
}
