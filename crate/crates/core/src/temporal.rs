//! The temporal stream: refined frame-level global features, a CLS
//! transformer over the keyframe sequence, and the hierarchical score head.
//! This is the only stream used at inference time.

use crate::blocks::{refine_block, transformer_encode, RefineBlockParams, TransformerParams};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::manifest::VideoFeatures;
use crate::ops::{self, Mode};
use crate::scalar::Scalar;
use crate::scores::ScoreSheet;
use crate::store::ParameterStore;
use crate::tensor::DenseTensor;

/// Two-layer score heads, one per hierarchy level. The hidden width equals
/// the embedding width (the projection matrices are square).
pub struct TemporalHeadParams<S: Scalar> {
    pub w4_l1: DenseTensor<S>,
    pub b4_l1: DenseTensor<S>,
    pub w5_l1: DenseTensor<S>,
    pub b5_l1: DenseTensor<S>,
    pub w4_l2: DenseTensor<S>,
    pub b4_l2: DenseTensor<S>,
    pub w5_l2: DenseTensor<S>,
    pub b5_l2: DenseTensor<S>,
}

impl<S: Scalar> TemporalHeadParams<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        d_emb: usize,
        n_level1: usize,
        n_level2: usize,
    ) -> Result<Self> {
        Ok(TemporalHeadParams {
            w4_l1: store.init_weight(&format!("{prefix}.l1.w4"), vec![d_emb, d_emb])?,
            b4_l1: store.init_bias(&format!("{prefix}.l1.b4"), vec![d_emb])?,
            w5_l1: store.init_weight(&format!("{prefix}.l1.w5"), vec![n_level1, d_emb])?,
            b5_l1: store.init_bias(&format!("{prefix}.l1.b5"), vec![n_level1])?,
            w4_l2: store.init_weight(&format!("{prefix}.l2.w4"), vec![d_emb, d_emb])?,
            b4_l2: store.init_bias(&format!("{prefix}.l2.b4"), vec![d_emb])?,
            w5_l2: store.init_weight(&format!("{prefix}.l2.w5"), vec![n_level2, d_emb])?,
            b5_l2: store.init_bias(&format!("{prefix}.l2.b5"), vec![n_level2])?,
        })
    }
}

/// Concatenates each keyframe's 2D and 3D features with the broadcast
/// video-level text feature and refines; one `d_emb` row per keyframe.
pub fn build_frame_global_features<S: Scalar>(
    features: &VideoFeatures<S>,
    refine: &RefineBlockParams<S>,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    let n_f = features.frame_2d.dims()[0];
    if features.clip_3d.dims()[0] != n_f {
        return Err(Error::dimension(
            "frame_features",
            format!(
                "frame_2d has {n_f} frames, clip_3d has {}",
                features.clip_3d.dims()[0]
            ),
        ));
    }
    let text_rows = ops::broadcast_rows(&features.text, n_f)?;
    let concat = ops::concat_lastdim(&[&features.frame_2d, &features.clip_3d, &text_rows])?;
    refine_block(&concat, refine, mode, keep_prob, store)
}

/// Prepends the CLS token, adds positions, encodes, and returns the
/// CLS-slot output as the video-level temporal feature.
pub fn temporal_encode<S: Scalar>(
    frame_globals: &DenseTensor<S>,
    params: &TransformerParams<S>,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    let cls = params
        .cls
        .as_ref()
        .ok_or_else(|| Error::Config("temporal encoder has no CLS vector".into()))?;
    let d = params.d_model;
    let cls_row = ops::reshape(cls, vec![1, d])?;
    let seq = ops::concat_rows(&[&cls_row, frame_globals])?;
    let encoded = transformer_encode(&seq, params, true, mode, keep_prob, store)?;
    ops::reshape(&ops::slice_rows(&encoded, 0, 1)?, vec![d])
}

/// Basic scores through the per-level two-layer heads, refined per the
/// hierarchy.
pub fn hierarchical_score_head<S: Scalar>(
    video_feature: &DenseTensor<S>,
    head: &TemporalHeadParams<S>,
    hierarchy: &LabelHierarchy,
) -> Result<ScoreSheet<S>> {
    if head.w5_l1.dims()[0] != hierarchy.n_level1() || head.w5_l2.dims()[0] != hierarchy.n_level2()
    {
        return Err(Error::Config(format!(
            "head sized {}x{} does not match hierarchy {}x{}",
            head.w5_l1.dims()[0],
            head.w5_l2.dims()[0],
            hierarchy.n_level1(),
            hierarchy.n_level2()
        )));
    }
    let basic = |w4: &DenseTensor<S>, b4, w5, b5| -> Result<DenseTensor<S>> {
        let hidden = ops::gelu(&ops::matmul_linear(video_feature, w4, Some(b4))?)?;
        ops::matmul_linear(&hidden, w5, Some(b5))
    };
    let basic_l1 = basic(&head.w4_l1, &head.b4_l1, &head.w5_l1, &head.b5_l1)?;
    let basic_l2 = basic(&head.w4_l2, &head.b4_l2, &head.w5_l2, &head.b5_l2)?;
    ScoreSheet::from_basic(basic_l1, basic_l2, hierarchy)
}
