//! Deterministic training loop: shuffled mini-batches, both streams
//! forward, the weighted total objective, AdamW, per-epoch validation
//! micro-F1, and early stopping on its plateau.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, PathIndices};
use crate::infer::{select_labels, Selection};
use crate::loss::{stream_loss, total_objective, LossWeights};
use crate::manifest::{load_video_features, Manifest, Split, VideoFeatures};
use crate::metrics::micro_f1;
use crate::model::TwoStreamModel;
use crate::knowledge::KnowledgeStore;
use crate::ops::{self, Mode};
use crate::optim::{adamw_step, AdamWConfig, TrainState};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::{backward, first_non_finite, no_grad, DenseTensor};

pub struct LoadedVideo<S: Scalar> {
    pub features: VideoFeatures<S>,
    pub paths: PathIndices,
}

pub struct LoadedDataset<S: Scalar> {
    pub train: Vec<LoadedVideo<S>>,
    pub val: Vec<LoadedVideo<S>>,
    pub test: Vec<LoadedVideo<S>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DatasetOptions {
    /// Skip records whose labels are missing from the indexing hierarchy
    /// (used when training against a reduced label set).
    pub skip_unknown_labels: bool,
}

/// Materializes every split of a manifest against `hierarchy` (which may
/// differ from the manifest's own, e.g. with a held-out label removed).
pub fn load_dataset<S: Scalar>(
    manifest: &Manifest,
    hierarchy: &LabelHierarchy,
    kstore: &mut KnowledgeStore<S>,
    params: &mut ParameterStore<S>,
    options: DatasetOptions,
) -> Result<LoadedDataset<S>> {
    let mut dataset = LoadedDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for record in &manifest.records {
        let paths = match hierarchy.path_indices(&record.labels) {
            Ok(p) => p,
            Err(e) if options.skip_unknown_labels => {
                log::debug!("skipping {}: {e}", record.video_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let features = load_video_features(record, &manifest.dir, &manifest.dims, kstore, params)?;
        let loaded = LoadedVideo { features, paths };
        match record.split {
            Split::Train => dataset.train.push(loaded),
            Split::Val => dataset.val.push(loaded),
            Split::Test => dataset.test.push(loaded),
        }
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub loss_temporal: f64,
    pub loss_nontemporal: f64,
    pub loss_distill: f64,
    /// Unweighted mean per-video Euclidean distance between the two
    /// streams' refined score vectors (level-1 + level-2 distances).
    pub distill_distance: f64,
    pub val_micro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: u32,
    pub best_val_f1: f64,
    pub stopped_early: bool,
}

/// Validation micro-F1 of the temporal stream at threshold 0.
pub fn validation_micro_f1<S: Scalar>(
    videos: &[LoadedVideo<S>],
    model: &TwoStreamModel<S>,
    store: &ParameterStore<S>,
) -> Result<f64> {
    let mut predicted = Vec::with_capacity(videos.len());
    let mut truth = Vec::with_capacity(videos.len());
    for v in videos {
        let sheet = no_grad(|| model.temporal_scores(&v.features, Mode::Eval, store))?;
        let scores = sheet.refined_level2.to_f64_vec();
        predicted.push(select_labels(&scores, Selection::Threshold(0.0)));
        truth.push(v.paths.level2.clone());
    }
    let (f1, _, _) = micro_f1(&predicted, &truth);
    Ok(f1)
}

fn mean_of<S: Scalar>(terms: &[DenseTensor<S>]) -> Result<DenseTensor<S>> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = ops::add(&acc, t)?;
    }
    ops::scale(&acc, 1.0 / terms.len() as f64)
}

pub fn train<S: Scalar>(
    cfg: &Config,
    model: &TwoStreamModel<S>,
    dataset: &LoadedDataset<S>,
    store: &ParameterStore<S>,
    state: &mut TrainState<S>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let weights = LossWeights::from_config(cfg);
    let adamw = AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let has_validation = !dataset.val.is_empty();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_f1: f64::NEG_INFINITY,
        stopped_early: false,
    };

    for _ in 0..cfg.max_epochs {
        state.epoch += 1;
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut state.rng);

        let mut sum_t = 0.0;
        let mut sum_nt = 0.0;
        let mut sum_distill = 0.0;
        let mut sum_distance = 0.0;
        let mut n_videos = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut jt_terms = Vec::with_capacity(batch.len());
            let mut jnt_terms = Vec::with_capacity(batch.len());
            let mut d1_terms = Vec::with_capacity(batch.len());
            let mut d2_terms = Vec::with_capacity(batch.len());
            for &idx in batch {
                let video = &dataset.train[idx];
                let t_sheet = model.temporal_scores(&video.features, Mode::Train, store)?;
                let nt_sheet = model.nontemporal_scores(&video.features, Mode::Train, store)?;
                jt_terms.push(stream_loss(&t_sheet, &video.paths, &weights)?);
                jnt_terms.push(stream_loss(&nt_sheet, &video.paths, &weights)?);
                let (d1, d2) = crate::loss::distill_distances(&t_sheet, &nt_sheet)?;
                sum_distance += d1.item()?.as_f64() + d2.item()?.as_f64();
                d1_terms.push(d1);
                d2_terms.push(d2);
            }
            let j_t = mean_of(&jt_terms)?;
            let j_nt = mean_of(&jnt_terms)?;
            let j_distill = ops::add(
                &ops::scale(&mean_of(&d1_terms)?, weights.beta_level1)?,
                &ops::scale(&mean_of(&d2_terms)?, weights.beta_level2)?,
            )?;
            let total = total_objective(&j_t, &j_nt, &j_distill, &weights)?;
            let total_value = total.item()?.as_f64();
            if !total_value.is_finite() {
                let culprit = first_non_finite(&total)
                    .map(|(op, dims)| format!("{op} {dims:?}"))
                    .unwrap_or_else(|| "total objective".into());
                return Err(Error::numeric(
                    "train",
                    format!(
                        "non-finite loss at epoch {}, step {}; first non-finite tensor: {culprit}",
                        state.epoch,
                        state.step + 1
                    ),
                ));
            }
            store.zero_grads();
            backward(&total)?;
            adamw_step(store, state, &adamw)?;

            sum_t += j_t.item()?.as_f64() * batch.len() as f64;
            sum_nt += j_nt.item()?.as_f64() * batch.len() as f64;
            sum_distill += j_distill.item()?.as_f64() * batch.len() as f64;
            n_videos += batch.len();
        }

        let val_micro = if has_validation {
            validation_micro_f1(&dataset.val, model, store)?
        } else {
            0.0
        };
        let stats = EpochStats {
            epoch: state.epoch,
            loss_temporal: sum_t / n_videos as f64,
            loss_nontemporal: sum_nt / n_videos as f64,
            loss_distill: sum_distill / n_videos as f64,
            distill_distance: sum_distance / n_videos as f64,
            val_micro_f1: val_micro,
        };
        log::info!(
            "epoch {} | J_t {:.4} | J_nt {:.4} | J_distill {:.4} | val F1 {:.4}",
            stats.epoch,
            stats.loss_temporal,
            stats.loss_nontemporal,
            stats.loss_distill,
            stats.val_micro_f1
        );
        report.epochs.push(stats);

        let improved = !has_validation || val_micro > state.best_metric;
        if improved {
            state.best_metric = val_micro;
            state.epochs_since_best = 0;
            report.best_epoch = state.epoch;
            report.best_val_f1 = val_micro;
            if let Some(path) = checkpoint_path {
                crate::checkpoint::save(store, state, cfg, path)?;
            }
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best as usize >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::DimsSpec;
    use crate::synth::{generate_synthetic_dataset, SynthSpec};

    fn tiny_corpus(seed: u64, n_videos: usize) -> (tempfile::TempDir, Manifest) {
        let spec = SynthSpec {
            n_videos,
            n_parents: 2,
            children_per_parent: 2,
            dims: DimsSpec {
                d2d: 6,
                d3d: 6,
                d_text: 6,
                d_region: 6,
                d_kg: 6,
                n_f: 3,
                max_keywords: 6,
            },
            regions_per_frame: 2,
            keywords_per_label: 3,
            keywords_per_video_label: 2,
            noise: 0.3,
            seed,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset::<f64>(&spec, dir.path()).unwrap();
        let m = crate::manifest::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        (dir, m)
    }

    fn tiny_train_config() -> Config {
        Config {
            d_emb: 8,
            heads: 2,
            layers: 1,
            region_layers: 1,
            ff_hidden: 16,
            batch_size: 8,
            max_epochs: 2,
            lr: 1e-3,
            ..Default::default()
        }
    }

    fn run_training(seed: u64, cfg: &Config, manifest: &Manifest) -> (Vec<EpochStats>, Vec<(String, Vec<usize>, Vec<f64>)>) {
        let mut kstore = manifest.load_knowledge::<f64>().unwrap();
        let mut store = ParameterStore::new(seed);
        let model = TwoStreamModel::build(cfg, &manifest.dims, &manifest.hierarchy, &mut kstore, &mut store).unwrap();
        let dataset = load_dataset(manifest, &manifest.hierarchy, &mut kstore, &mut store, DatasetOptions::default()).unwrap();
        let mut state = TrainState::new(cfg.seed);
        let report = train(cfg, &model, &dataset, &store, &mut state, None).unwrap();
        (report.epochs, store.to_raw())
    }

    #[test]
    fn same_seed_gives_bit_identical_runs() {
        let (_dir, manifest) = tiny_corpus(5, 24);
        let cfg = tiny_train_config();
        let (e1, p1) = run_training(3, &cfg, &manifest);
        let (e2, p2) = run_training(3, &cfg, &manifest);
        assert_eq!(e1.len(), e2.len());
        for (a, b) in e1.iter().zip(&e2) {
            assert_eq!(a.loss_temporal.to_bits(), b.loss_temporal.to_bits());
            assert_eq!(a.loss_nontemporal.to_bits(), b.loss_nontemporal.to_bits());
            assert_eq!(a.loss_distill.to_bits(), b.loss_distill.to_bits());
        }
        for ((n1, d1, v1), (n2, d2, v2)) in p1.iter().zip(&p2) {
            assert_eq!(n1, n2);
            assert_eq!(d1, d2);
            for (a, b) in v1.iter().zip(v2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_nontemporal_weights_leave_its_parameters_gradient_free() {
        let (_dir, manifest) = tiny_corpus(6, 16);
        let mut cfg = tiny_train_config();
        cfg.beta_nt = 0.0;
        cfg.beta_distill = 0.0;
        cfg.max_epochs = 1;
        cfg.weight_decay = 0.0;
        let mut kstore = manifest.load_knowledge::<f64>().unwrap();
        let mut store = ParameterStore::new(1);
        let model = TwoStreamModel::build(&cfg, &manifest.dims, &manifest.hierarchy, &mut kstore, &mut store).unwrap();
        let dataset = load_dataset(&manifest, &manifest.hierarchy, &mut kstore, &mut store, DatasetOptions::default()).unwrap();

        // One manual step to inspect gradients directly.
        let weights = LossWeights::from_config(&cfg);
        let video = &dataset.train[0];
        let t_sheet = model.temporal_scores(&video.features, Mode::Eval, &store).unwrap();
        let nt_sheet = model.nontemporal_scores(&video.features, Mode::Eval, &store).unwrap();
        let jt = stream_loss(&t_sheet, &video.paths, &weights).unwrap();
        let jnt = stream_loss(&nt_sheet, &video.paths, &weights).unwrap();
        let jd = crate::loss::distill_loss(&[(&t_sheet, &nt_sheet)], &weights).unwrap();
        let total = total_objective(&jt, &jnt, &jd, &weights).unwrap();
        store.zero_grads();
        backward(&total).unwrap();
        for (name, tensor) in store.iter() {
            if name.starts_with("nontemporal.") || name.starts_with("kg_fallback.") {
                let grad = tensor.grad().unwrap();
                assert!(
                    grad.iter().all(|&g| g == 0.0),
                    "parameter {name} received gradient despite zero weights"
                );
            }
        }
    }

    #[test]
    fn early_stopping_waits_for_patience() {
        let (_dir, manifest) = tiny_corpus(7, 24);
        let mut cfg = tiny_train_config();
        cfg.max_epochs = 20;
        cfg.patience = 3;
        // Zero learning rate: nothing improves after epoch 1.
        cfg.lr = 1e-30;
        let mut kstore = manifest.load_knowledge::<f64>().unwrap();
        let mut store = ParameterStore::new(2);
        let model = TwoStreamModel::build(&cfg, &manifest.dims, &manifest.hierarchy, &mut kstore, &mut store).unwrap();
        let dataset = load_dataset(&manifest, &manifest.hierarchy, &mut kstore, &mut store, DatasetOptions::default()).unwrap();
        let mut state = TrainState::new(0);
        let report = train(&cfg, &model, &dataset, &store, &mut state, None).unwrap();
        if report.stopped_early {
            // Epoch 1 improves (from -inf); the stop needs `patience` more.
            assert!(report.epochs.len() >= cfg.patience + 1);
            assert_eq!(report.epochs.len(), report.best_epoch as usize + cfg.patience);
        }
    }
}
