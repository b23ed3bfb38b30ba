//! The knowledge-enhanced non-temporal stream: region encoding, frame-local
//! attention fusion, keyword-conditioned soft clustering, video-level
//! pooling, and embedding-matching label scoring.
//!
//! Every entry point bumps a global counter so inference can assert that
//! this stream never runs.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::blocks::{
    self_attention, transformer_encode, AttentionProjections, RefineBlockParams, TransformerParams,
};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::knowledge::KnowledgeStore;
use crate::manifest::VideoFeatures;
use crate::ops::{self, Mode};
use crate::scalar::Scalar;
use crate::scores::ScoreSheet;
use crate::store::ParameterStore;
use crate::temporal::build_frame_global_features;
use crate::tensor::DenseTensor;

static NT_OPS: AtomicU64 = AtomicU64::new(0);

fn count_op() {
    NT_OPS.fetch_add(1, Ordering::Relaxed);
}

/// Number of non-temporal operations executed since the last reset.
pub fn op_count() -> u64 {
    NT_OPS.load(Ordering::Relaxed)
}

pub fn reset_op_count() {
    NT_OPS.store(0, Ordering::Relaxed);
}

/// The three shared two-layer generators mapping a keyword embedding to a
/// cluster weight vector, a scalar bias, and a center vector.
pub struct GeneratorParams<S: Scalar> {
    pub w_gen: TwoLayer<S>,
    pub c_gen: TwoLayer<S>,
    pub z_gen: TwoLayer<S>,
}

pub struct TwoLayer<S: Scalar> {
    pub w1: DenseTensor<S>,
    pub b1: DenseTensor<S>,
    pub w2: DenseTensor<S>,
    pub b2: DenseTensor<S>,
}

impl<S: Scalar> TwoLayer<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(TwoLayer {
            w1: store.init_weight(&format!("{prefix}.w1"), vec![hidden, d_in])?,
            b1: store.init_bias(&format!("{prefix}.b1"), vec![hidden])?,
            w2: store.init_weight(&format!("{prefix}.w2"), vec![d_out, hidden])?,
            b2: store.init_bias(&format!("{prefix}.b2"), vec![d_out])?,
        })
    }

    pub fn apply(&self, x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
        let hidden = ops::gelu(&ops::matmul_linear(x, &self.w1, Some(&self.b1))?)?;
        ops::matmul_linear(&hidden, &self.w2, Some(&self.b2))
    }
}

impl<S: Scalar> GeneratorParams<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        d_kg: usize,
        hidden: usize,
        d_emb: usize,
    ) -> Result<Self> {
        Ok(GeneratorParams {
            w_gen: TwoLayer::register(store, &format!("{prefix}.w"), d_kg, hidden, d_emb)?,
            c_gen: TwoLayer::register(store, &format!("{prefix}.c"), d_kg, hidden, 1)?,
            z_gen: TwoLayer::register(store, &format!("{prefix}.z"), d_kg, hidden, d_emb)?,
        })
    }
}

/// Shared per-level matching nets: a video-side and a label-side two-layer
/// transform whose outputs are scored by inner product.
pub struct MatchingNetParams<S: Scalar> {
    pub video_l1: TwoLayer<S>,
    pub label_l1: TwoLayer<S>,
    pub video_l2: TwoLayer<S>,
    pub label_l2: TwoLayer<S>,
}

impl<S: Scalar> MatchingNetParams<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        d_emb: usize,
        d_kg: usize,
        match_dim: usize,
    ) -> Result<Self> {
        Ok(MatchingNetParams {
            video_l1: TwoLayer::register(store, &format!("{prefix}.l1.video"), d_emb, d_emb, match_dim)?,
            label_l1: TwoLayer::register(store, &format!("{prefix}.l1.label"), d_kg, d_emb, match_dim)?,
            video_l2: TwoLayer::register(store, &format!("{prefix}.l2.video"), d_emb, d_emb, match_dim)?,
            label_l2: TwoLayer::register(store, &format!("{prefix}.l2.label"), d_kg, d_emb, match_dim)?,
        })
    }
}

/// Per-label embedding rows for both levels, resolved against a knowledge
/// store (pretrained where matched, trainable fallbacks otherwise).
pub struct LabelEmbeddings<S: Scalar> {
    pub level1: Vec<DenseTensor<S>>,
    pub level2: Vec<DenseTensor<S>>,
}

impl<S: Scalar> LabelEmbeddings<S> {
    /// Resolves every label token, creating fallback parameters for
    /// unmatched labels. Runs at model build time.
    pub fn resolve(
        hierarchy: &LabelHierarchy,
        kstore: &mut KnowledgeStore<S>,
        params: &mut ParameterStore<S>,
    ) -> Result<Self> {
        use crate::knowledge::TokenRole;
        let mut level1 = Vec::with_capacity(hierarchy.n_level1());
        for i in 0..hierarchy.n_level1() {
            let token = hierarchy.kg_token_l1(i).to_string();
            level1.push(
                kstore
                    .lookup(params, &token, TokenRole::Label)?
                    .expect("label lookup always resolves"),
            );
        }
        let mut level2 = Vec::with_capacity(hierarchy.n_level2());
        for i in 0..hierarchy.n_level2() {
            let token = hierarchy.kg_token_l2(i).to_string();
            level2.push(
                kstore
                    .lookup(params, &token, TokenRole::Label)?
                    .expect("label lookup always resolves"),
            );
        }
        Ok(LabelEmbeddings { level1, level2 })
    }
}

/// Same refine contract as the global features, with the stream's own
/// parameter set.
pub fn build_frame_local_features<S: Scalar>(
    features: &VideoFeatures<S>,
    refine: &RefineBlockParams<S>,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    count_op();
    build_frame_global_features(features, refine, mode, keep_prob, store)
}

/// Inner-frame reasoning over one keyframe's candidate regions: a width
/// adapter followed by a position-free transformer encoder.
pub fn region_encode<S: Scalar>(
    frame_regions: &DenseTensor<S>,
    adapter_w: &DenseTensor<S>,
    adapter_b: &DenseTensor<S>,
    encoder: &TransformerParams<S>,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    count_op();
    let adapted = ops::matmul_linear(frame_regions, adapter_w, Some(adapter_b))?;
    transformer_encode(&adapted, encoder, false, mode, keep_prob, store)
}

/// Single-query attention of a frame's local feature over its encoded
/// regions. Frames with no regions pass the local feature through.
pub fn frame_local_fusion<S: Scalar>(
    local_feature: &DenseTensor<S>,
    encoded_regions: Option<&DenseTensor<S>>,
    attn: &AttentionProjections<S>,
) -> Result<DenseTensor<S>> {
    count_op();
    let Some(regions) = encoded_regions else {
        return Ok(local_feature.clone());
    };
    let d = local_feature.numel();
    let query = ops::reshape(local_feature, vec![1, d])?;
    let (fused, _weights) = self_attention(&query, regions, attn)?;
    ops::reshape(&fused, vec![fused.numel()])
}

/// Generated cluster parameters for one keyword embedding:
/// (weight vector, scalar bias, center vector).
pub fn generate_cluster_params<S: Scalar>(
    kg_vec: &DenseTensor<S>,
    gen: &GeneratorParams<S>,
) -> Result<(DenseTensor<S>, DenseTensor<S>, DenseTensor<S>)> {
    count_op();
    Ok((
        gen.w_gen.apply(kg_vec)?,
        gen.c_gen.apply(kg_vec)?,
        gen.z_gen.apply(kg_vec)?,
    ))
}

/// Soft assignment of frames to one keyword cluster:
/// `alpha_j = softmax_j(w . f_j + c)`, `f_kw = sum_j alpha_j (f_j - z)`.
pub fn keyword_cluster_fusion<S: Scalar>(
    fused_frames: &DenseTensor<S>,
    kg_vec: &DenseTensor<S>,
    gen: &GeneratorParams<S>,
) -> Result<DenseTensor<S>> {
    count_op();
    let (w, c, z) = generate_cluster_params(kg_vec, gen)?;
    let n_f = fused_frames.dims()[0];
    let d = fused_frames.last_dim();
    // Logits over frames: (n_f x d) . w + c, flattened to one softmax slice.
    let w_row = ops::reshape(&w, vec![1, d])?;
    let logits = ops::matmul_linear(fused_frames, &w_row, None)?;
    let logits = ops::add(&ops::reshape(&logits, vec![n_f])?, &c)?;
    let alpha = ops::softmax_lastdim(&logits)?;
    let centered = ops::sub(fused_frames, &z)?;
    let weighted = ops::matmul(&ops::reshape(&alpha, vec![1, n_f])?, &centered)?;
    ops::reshape(&weighted, vec![d])
}

/// Video-level non-temporal feature: mean of the keyword features plus the
/// frame mean, then a linear projection. With no usable keywords the
/// keyword term is dropped.
pub fn video_nontemporal_feature<S: Scalar>(
    fused_frames: &DenseTensor<S>,
    keyword_features: &[DenseTensor<S>],
    proj_w: &DenseTensor<S>,
    proj_b: &DenseTensor<S>,
) -> Result<DenseTensor<S>> {
    count_op();
    let frame_mean = ops::mean_rows(fused_frames)?;
    let pooled = if keyword_features.is_empty() {
        frame_mean
    } else {
        let mut acc = keyword_features[0].clone();
        for kw in &keyword_features[1..] {
            acc = ops::add(&acc, kw)?;
        }
        let kw_mean = ops::scale(&acc, 1.0 / keyword_features.len() as f64)?;
        ops::add(&kw_mean, &frame_mean)?
    };
    ops::matmul_linear(&pooled, proj_w, Some(proj_b))
}

/// Matching-network label scores: both sides map into a shared space and
/// score by inner product; refinement follows the hierarchy.
pub fn label_matching_scores<S: Scalar>(
    e_nt: &DenseTensor<S>,
    hierarchy: &LabelHierarchy,
    labels: &LabelEmbeddings<S>,
    nets: &MatchingNetParams<S>,
) -> Result<ScoreSheet<S>> {
    count_op();
    if labels.level1.len() != hierarchy.n_level1() || labels.level2.len() != hierarchy.n_level2() {
        return Err(Error::Config(format!(
            "label embeddings sized {}x{} vs hierarchy {}x{}",
            labels.level1.len(),
            labels.level2.len(),
            hierarchy.n_level1(),
            hierarchy.n_level2()
        )));
    }
    let level_scores = |video_net: &TwoLayer<S>,
                        label_net: &TwoLayer<S>,
                        rows: &[DenseTensor<S>]|
     -> Result<DenseTensor<S>> {
        let video_side = video_net.apply(e_nt)?;
        let d_kg = rows[0].numel();
        let row_mats: Vec<DenseTensor<S>> = rows
            .iter()
            .map(|r| ops::reshape(r, vec![1, d_kg]))
            .collect::<Result<_>>()?;
        let refs: Vec<&DenseTensor<S>> = row_mats.iter().collect();
        let label_matrix = ops::concat_rows(&refs)?;
        let label_side = label_net.apply(&label_matrix)?;
        let m = video_side.numel();
        let scores = ops::matmul(&label_side, &ops::reshape(&video_side, vec![m, 1])?)?;
        ops::reshape(&scores, vec![rows.len()])
    };
    let basic_l1 = level_scores(&nets.video_l1, &nets.label_l1, &labels.level1)?;
    let basic_l2 = level_scores(&nets.video_l2, &nets.label_l2, &labels.level2)?;
    ScoreSheet::from_basic(basic_l1, basic_l2, hierarchy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n_f: usize, d: usize, salt: f64) -> DenseTensor<f64> {
        DenseTensor::new(
            vec![n_f, d],
            (0..n_f * d).map(|i| ((i as f64) * 0.61 + salt).sin()).collect(),
        )
        .unwrap()
    }

    fn generators(d_kg: usize, hidden: usize, d_emb: usize) -> (GeneratorParams<f64>, ParameterStore<f64>) {
        let mut store = ParameterStore::new(17);
        let gen = GeneratorParams::register(&mut store, "gen", d_kg, hidden, d_emb).unwrap();
        (gen, store)
    }

    #[test]
    fn zero_generators_emit_their_biases() {
        let (gen, _store) = generators(3, 4, 5);
        for t in [&gen.w_gen.w1, &gen.w_gen.w2, &gen.c_gen.w1, &gen.c_gen.w2, &gen.z_gen.w1, &gen.z_gen.w2] {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        gen.w_gen.b2.set_data(vec![0.25; 5]).unwrap();
        gen.c_gen.b2.set_data(vec![-1.5]).unwrap();
        gen.z_gen.b2.set_data(vec![2.0; 5]).unwrap();
        let kg_a = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let kg_b = DenseTensor::new(vec![3], vec![-9.0, 0.0, 4.0]).unwrap();
        let (wa, ca, za) = generate_cluster_params(&kg_a, &gen).unwrap();
        let (wb, cb, zb) = generate_cluster_params(&kg_b, &gen).unwrap();
        assert_eq!(wa.to_vec(), vec![0.25; 5]);
        assert_eq!(wa.to_vec(), wb.to_vec());
        assert_eq!(ca.to_vec(), cb.to_vec());
        assert_eq!(za.to_vec(), vec![2.0; 5]);
        assert_eq!(za.to_vec(), zb.to_vec());
    }

    #[test]
    fn equal_embeddings_give_equal_cluster_params() {
        let (gen, _store) = generators(4, 6, 3);
        let kg = DenseTensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let kg_copy = DenseTensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let (wa, ca, za) = generate_cluster_params(&kg, &gen).unwrap();
        let (wb, cb, zb) = generate_cluster_params(&kg_copy, &gen).unwrap();
        assert_eq!(wa.to_vec(), wb.to_vec());
        assert_eq!(ca.to_vec(), cb.to_vec());
        assert_eq!(za.to_vec(), zb.to_vec());
    }

    #[test]
    fn single_frame_cluster_is_frame_minus_center() {
        let (gen, _store) = generators(2, 4, 3);
        let kg = DenseTensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let f = frames(1, 3, 0.2);
        let (_, _, z) = generate_cluster_params(&kg, &gen).unwrap();
        let fkw = keyword_cluster_fusion(&f, &kg, &gen).unwrap();
        let expect: Vec<f64> = f
            .to_vec()
            .iter()
            .zip(z.to_vec())
            .map(|(a, b)| a - b)
            .collect();
        for (got, want) in fkw.to_vec().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_cluster_is_mean_minus_center() {
        let (gen, _store) = generators(2, 4, 3);
        for t in [&gen.w_gen.w1, &gen.w_gen.w2] {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        gen.w_gen.b1.set_data(vec![0.0; 4]).unwrap();
        gen.w_gen.b2.set_data(vec![0.0; 3]).unwrap();
        let kg = DenseTensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let f = frames(4, 3, 1.0);
        let (_, _, z) = generate_cluster_params(&kg, &gen).unwrap();
        let fkw = keyword_cluster_fusion(&f, &kg, &gen).unwrap();
        let zv = z.to_vec();
        let fv = f.to_vec();
        for j in 0..3 {
            let mean: f64 = (0..4).map(|r| fv[r * 3 + j]).sum::<f64>() / 4.0;
            assert!((fkw.to_vec()[j] - (mean - zv[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_permutation_leaves_keyword_feature_unchanged() {
        let (gen, _store) = generators(3, 5, 4);
        let kg = DenseTensor::new(vec![3], vec![0.2, 0.4, -0.9]).unwrap();
        let f = frames(5, 4, 0.0);
        let fv = f.to_vec();
        let perm = [4usize, 2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| fv[r * 4..(r + 1) * 4].to_vec()).collect();
        let fp = DenseTensor::new(vec![5, 4], permuted).unwrap();
        let a = keyword_cluster_fusion(&f, &kg, &gen).unwrap();
        let b = keyword_cluster_fusion(&fp, &kg, &gen).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_region_frame_passes_local_feature_through() {
        let mut store = ParameterStore::<f64>::new(5);
        let attn = AttentionProjections::register(&mut store, "a", 4, 4, 4).unwrap();
        let local = DenseTensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = frame_local_fusion(&local, None, &attn).unwrap();
        assert!(out.same_identity(&local));
    }

    #[test]
    fn identical_regions_fuse_to_their_value_projection() {
        let mut store = ParameterStore::<f64>::new(6);
        let attn = AttentionProjections::register(&mut store, "a", 3, 3, 3).unwrap();
        let local = DenseTensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let region = [0.5, -0.25, 1.0];
        let regions = DenseTensor::new(vec![4, 3], region.repeat(4)).unwrap();
        let fused = frame_local_fusion(&local, Some(&regions), &attn).unwrap();
        let rvec = DenseTensor::new(vec![1, 3], region.to_vec()).unwrap();
        let v = ops::matmul_linear(&rvec, &attn.wv, None).unwrap();
        for (a, b) in fused.to_vec().iter().zip(v.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn no_keywords_pool_falls_back_to_frame_mean() {
        let mut store = ParameterStore::<f64>::new(7);
        let w = store.init_weight("w", vec![3, 3]).unwrap();
        let b = store.init_bias("b", vec![3]).unwrap();
        let f = frames(4, 3, 0.5);
        let out = video_nontemporal_feature(&f, &[], &w, &b).unwrap();
        let mean = ops::mean_rows(&f).unwrap();
        let expect = ops::matmul_linear(&mean, &w, Some(&b)).unwrap();
        assert_eq!(out.to_vec(), expect.to_vec());
    }

    #[test]
    fn duplicate_keywords_average_to_one_copy() {
        let mut store = ParameterStore::<f64>::new(8);
        let w = store.init_weight("w", vec![3, 3]).unwrap();
        let b = store.init_bias("b", vec![3]).unwrap();
        let f = frames(4, 3, 0.5);
        let kw = DenseTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let one = video_nontemporal_feature(&f, &[kw.clone()], &w, &b).unwrap();
        let many =
            video_nontemporal_feature(&f, &[kw.clone(), kw.clone(), kw], &w, &b).unwrap();
        for (a, b) in one.to_vec().iter().zip(many.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn op_counter_tracks_calls() {
        reset_op_count();
        let (gen, _store) = generators(2, 3, 2);
        let kg = DenseTensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let _ = generate_cluster_params(&kg, &gen).unwrap();
        assert!(op_count() >= 1);
        reset_op_count();
        assert_eq!(op_count(), 0);
    }
}
