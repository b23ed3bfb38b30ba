//! Assembly of the full two-stream model: parameter registration in a
//! fixed order, per-video forward passes for both streams, and a `Send`
//! snapshot for worker threads.

use crate::blocks::{AttentionProjections, RefineBlockParams, TransformerParams};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::knowledge::KnowledgeStore;
use crate::manifest::{DimsSpec, VideoFeatures};
use crate::nontemporal::{
    self, GeneratorParams, LabelEmbeddings, MatchingNetParams,
};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::scores::ScoreSheet;
use crate::store::ParameterStore;
use crate::temporal::{
    build_frame_global_features, hierarchical_score_head, temporal_encode, TemporalHeadParams,
};
use crate::tensor::DenseTensor;

pub struct TwoStreamModel<S: Scalar> {
    pub dims: DimsSpec,
    pub keep_prob: f64,
    pub hierarchy: LabelHierarchy,
    // temporal stream
    pub refine_gframe: RefineBlockParams<S>,
    pub temporal_encoder: TransformerParams<S>,
    pub temporal_head: TemporalHeadParams<S>,
    // non-temporal stream
    pub refine_lframe: RefineBlockParams<S>,
    pub region_adapter_w: DenseTensor<S>,
    pub region_adapter_b: DenseTensor<S>,
    pub region_encoder: TransformerParams<S>,
    pub local_attn: AttentionProjections<S>,
    pub generators: GeneratorParams<S>,
    pub nt_proj_w: DenseTensor<S>,
    pub nt_proj_b: DenseTensor<S>,
    pub matching: MatchingNetParams<S>,
    pub label_embeddings: LabelEmbeddings<S>,
}

/// Label-side matching features, computed once and shared across the
/// videos of a batch.
pub struct LabelSide<S: Scalar> {
    pub hierarchy: LabelHierarchy,
    pub embeddings: LabelEmbeddings<S>,
}

impl<S: Scalar> TwoStreamModel<S> {
    /// Registers every parameter in a fixed order, then resolves all label
    /// embeddings (creating trainable fallbacks for unmatched labels).
    pub fn build(
        cfg: &Config,
        dims: &DimsSpec,
        hierarchy: &LabelHierarchy,
        kstore: &mut KnowledgeStore<S>,
        store: &mut ParameterStore<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        store.set_weight_init(if cfg.init_std > 0.0 {
            crate::store::WeightInit::Gaussian(cfg.init_std)
        } else {
            crate::store::WeightInit::FanIn
        });
        if dims.d_kg != kstore.d_kg() {
            return Err(Error::Config(format!(
                "manifest d_kg {} vs knowledge store {}",
                dims.d_kg,
                kstore.d_kg()
            )));
        }
        let d_emb = cfg.d_emb;
        let concat_dim = dims.d2d + dims.d3d + dims.d_text;
        let refine_hidden = cfg.refine_hidden_or_default();
        let ff_hidden = cfg.ff_hidden_or_default();

        let refine_gframe =
            RefineBlockParams::register(store, "temporal.refine", concat_dim, refine_hidden, d_emb)?;
        let temporal_encoder = TransformerParams::register(
            store,
            "temporal.encoder",
            d_emb,
            cfg.heads,
            cfg.layers,
            ff_hidden,
            Some(dims.n_f + 1),
            true,
        )?;
        let temporal_head =
            TemporalHeadParams::register(store, "temporal.head", d_emb, hierarchy.n_level1(), hierarchy.n_level2())?;

        let refine_lframe =
            RefineBlockParams::register(store, "nontemporal.refine", concat_dim, refine_hidden, d_emb)?;
        let region_adapter_w =
            store.init_weight("nontemporal.region_adapter.w", vec![d_emb, dims.d_region])?;
        let region_adapter_b = store.init_bias("nontemporal.region_adapter.b", vec![d_emb])?;
        let region_encoder = TransformerParams::register(
            store,
            "nontemporal.region_encoder",
            d_emb,
            cfg.heads,
            cfg.region_layers,
            ff_hidden,
            None,
            false,
        )?;
        let local_attn = AttentionProjections::register(
            store,
            "nontemporal.local_attn",
            d_emb,
            cfg.d_key_or_default(),
            d_emb,
        )?;
        let generators =
            GeneratorParams::register(store, "nontemporal.generator", dims.d_kg, d_emb, d_emb)?;
        let nt_proj_w = store.init_weight("nontemporal.video_proj.w", vec![d_emb, d_emb])?;
        let nt_proj_b = store.init_bias("nontemporal.video_proj.b", vec![d_emb])?;
        let matching = MatchingNetParams::register(
            store,
            "nontemporal.matching",
            d_emb,
            dims.d_kg,
            cfg.match_dim_or_default(),
        )?;
        let label_embeddings = LabelEmbeddings::resolve(hierarchy, kstore, store)?;

        Ok(TwoStreamModel {
            dims: *dims,
            keep_prob: cfg.keep_prob,
            hierarchy: hierarchy.clone(),
            refine_gframe,
            temporal_encoder,
            temporal_head,
            refine_lframe,
            region_adapter_w,
            region_adapter_b,
            region_encoder,
            local_attn,
            generators,
            nt_proj_w,
            nt_proj_b,
            matching,
            label_embeddings,
        })
    }

    /// Temporal stream scores for one video.
    pub fn temporal_scores(
        &self,
        features: &VideoFeatures<S>,
        mode: Mode,
        store: &ParameterStore<S>,
    ) -> Result<ScoreSheet<S>> {
        let frame_globals =
            build_frame_global_features(features, &self.refine_gframe, mode, self.keep_prob, store)?;
        let e_video =
            temporal_encode(&frame_globals, &self.temporal_encoder, mode, self.keep_prob, store)?;
        hierarchical_score_head(&e_video, &self.temporal_head, &self.hierarchy)
    }

    /// Knowledge-enhanced video-level feature `e_nt` for one video.
    pub fn nontemporal_video_feature(
        &self,
        features: &VideoFeatures<S>,
        mode: Mode,
        store: &ParameterStore<S>,
    ) -> Result<DenseTensor<S>> {
        let locals = nontemporal::build_frame_local_features(
            features,
            &self.refine_lframe,
            mode,
            self.keep_prob,
            store,
        )?;
        let n_f = locals.dims()[0];
        let d = locals.last_dim();
        let mut fused_rows = Vec::with_capacity(n_f);
        for j in 0..n_f {
            let local_j = crate::ops::reshape(&crate::ops::slice_rows(&locals, j, 1)?, vec![d])?;
            let encoded = match &features.regions {
                Some(frames) => Some(nontemporal::region_encode(
                    &frames[j],
                    &self.region_adapter_w,
                    &self.region_adapter_b,
                    &self.region_encoder,
                    mode,
                    self.keep_prob,
                    store,
                )?),
                None => None,
            };
            let fused =
                nontemporal::frame_local_fusion(&local_j, encoded.as_ref(), &self.local_attn)?;
            fused_rows.push(crate::ops::reshape(&fused, vec![1, d])?);
        }
        let refs: Vec<&DenseTensor<S>> = fused_rows.iter().collect();
        let fused_frames = crate::ops::concat_rows(&refs)?;
        let keyword_features: Vec<DenseTensor<S>> = features
            .keyword_embeddings
            .iter()
            .map(|kg| nontemporal::keyword_cluster_fusion(&fused_frames, kg, &self.generators))
            .collect::<Result<_>>()?;
        nontemporal::video_nontemporal_feature(
            &fused_frames,
            &keyword_features,
            &self.nt_proj_w,
            &self.nt_proj_b,
        )
    }

    /// Non-temporal stream scores for one video against the model's own
    /// hierarchy and label embeddings.
    pub fn nontemporal_scores(
        &self,
        features: &VideoFeatures<S>,
        mode: Mode,
        store: &ParameterStore<S>,
    ) -> Result<ScoreSheet<S>> {
        let e_nt = self.nontemporal_video_feature(features, mode, store)?;
        nontemporal::label_matching_scores(
            &e_nt,
            &self.hierarchy,
            &self.label_embeddings,
            &self.matching,
        )
    }

    /// Non-temporal scores against an extended label side (label
    /// scalability: new labels scored without any parameter update).
    pub fn nontemporal_scores_against(
        &self,
        features: &VideoFeatures<S>,
        side: &LabelSide<S>,
        mode: Mode,
        store: &ParameterStore<S>,
    ) -> Result<ScoreSheet<S>> {
        let e_nt = self.nontemporal_video_feature(features, mode, store)?;
        nontemporal::label_matching_scores(&e_nt, &side.hierarchy, &side.embeddings, &self.matching)
    }
}

/// Plain-data (`Send`) snapshot of a trained model plus everything needed
/// to rebuild it: configuration, dims, hierarchy, pretrained embeddings,
/// and raw parameter values.
#[derive(Clone)]
pub struct ModelSnapshot<S: Scalar> {
    pub config: Config,
    pub dims: DimsSpec,
    pub hierarchy_spec: crate::hierarchy::HierarchySpec,
    pub kstore_raw: Vec<(String, Vec<S>)>,
    pub params_raw: Vec<(String, Vec<usize>, Vec<S>)>,
    pub store_seed: u64,
}

impl<S: Scalar> ModelSnapshot<S> {
    pub fn capture(
        config: &Config,
        model: &TwoStreamModel<S>,
        kstore: &KnowledgeStore<S>,
        store: &ParameterStore<S>,
    ) -> Self {
        ModelSnapshot {
            config: config.clone(),
            dims: model.dims,
            hierarchy_spec: model.hierarchy.to_spec(),
            kstore_raw: kstore.to_raw(),
            params_raw: store.to_raw(),
            store_seed: store.seed(),
        }
    }

    /// Rebuilds the model and overwrites the freshly initialized parameters
    /// with the snapshot values.
    pub fn restore(&self) -> Result<(TwoStreamModel<S>, KnowledgeStore<S>, ParameterStore<S>)> {
        let hierarchy = LabelHierarchy::from_spec(&self.hierarchy_spec)?;
        let mut kstore = KnowledgeStore::from_raw(self.dims.d_kg, &self.kstore_raw)?;
        let mut store = ParameterStore::new(self.store_seed);
        let model = TwoStreamModel::build(&self.config, &self.dims, &hierarchy, &mut kstore, &mut store)?;
        store.load_raw(&self.params_raw)?;
        Ok((model, kstore, store))
    }
}
