//! Temporal-only inference with Top-K / threshold selection, and report
//! assembly. The non-temporal stream is never executed here; the
//! instrumentation counter in [`crate::nontemporal`] stays untouched.

use serde::Serialize;

use crate::error::Result;
use crate::hierarchy::LabelHierarchy;
use crate::manifest::VideoFeatures;
use crate::metrics::{micro_f1, rp_at_accuracy, MetricReport};
use crate::model::TwoStreamModel;
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::no_grad;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    TopK(usize),
    Threshold(f64),
}

/// Indices picked by the selection rule over refined level-2 scores.
pub fn select_labels(scores: &[f64], selection: Selection) -> Vec<usize> {
    match selection {
        Selection::Threshold(tau) => scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= tau)
            .map(|(i, _)| i)
            .collect(),
        Selection::TopK(k) => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            let mut picked: Vec<usize> = order.into_iter().take(k).collect();
            picked.sort_unstable();
            picked
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub video_id: String,
    /// Selected level-2 label names after the selection rule.
    pub selected: Vec<String>,
    /// Refined level-2 scores by label name order of the hierarchy.
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub selected_indices: Vec<usize>,
    #[serde(skip)]
    pub scores_level1: Vec<f64>,
}

/// Temporal-only inference over a set of videos.
pub fn infer<S: Scalar>(
    features: &[VideoFeatures<S>],
    model: &TwoStreamModel<S>,
    store: &ParameterStore<S>,
    selection: Selection,
) -> Result<Vec<Prediction>> {
    features
        .iter()
        .map(|f| {
            let sheet = no_grad(|| model.temporal_scores(f, Mode::Eval, store))?;
            let scores = sheet.refined_level2.to_f64_vec();
            let scores_level1 = sheet.refined_level1.to_f64_vec();
            let selected_indices = select_labels(&scores, selection);
            Ok(Prediction {
                video_id: f.video_id.clone(),
                selected: selected_indices
                    .iter()
                    .map(|&i| model.hierarchy.level2_names()[i].clone())
                    .collect(),
                scores,
                selected_indices,
                scores_level1,
            })
        })
        .collect()
}

/// Computes the full metric report for a prediction set against per-video
/// ground-truth label paths.
pub fn compute_report(
    predictions: &[Prediction],
    truth_level1: &[Vec<usize>],
    truth_level2: &[Vec<usize>],
    hierarchy: &LabelHierarchy,
    selection: Selection,
) -> Result<MetricReport> {
    let selected: Vec<Vec<usize>> = predictions
        .iter()
        .map(|p| p.selected_indices.clone())
        .collect();
    let (f1, precision, recall) = micro_f1(&selected, truth_level2);
    let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.scores.clone()).collect();
    let (rp_cov, rp_tau) = rp_at_accuracy(&scores, truth_level2, 0.90)?;
    let l1_selected: Vec<Vec<usize>> = predictions
        .iter()
        .map(|p| select_labels(&p.scores_level1, selection))
        .collect();
    let (l1_f1, l1_p, l1_r) = micro_f1(&l1_selected, truth_level1);
    let report = MetricReport {
        micro_f1: f1,
        precision,
        recall,
        rp90_coverage: rp_cov,
        rp90_threshold: rp_tau,
        level1_micro_f1: l1_f1,
        level1_precision: l1_p,
        level1_recall: l1_r,
        videos: predictions.len(),
        labels_level1: hierarchy.n_level1(),
        labels_level2: hierarchy.n_level2(),
    };
    report.validate_rates()?;
    Ok(report)
}

/// Inference over raw manifest records, optionally fanned out across
/// worker threads. Each worker rebuilds the model from the `Send` snapshot
/// and loads its own chunk of feature files; outputs keep record order.
pub fn infer_records_parallel<S: Scalar>(
    snapshot: &crate::model::ModelSnapshot<S>,
    records: &[crate::manifest::VideoRecord],
    manifest_dir: &std::path::Path,
    selection: Selection,
    n_threads: usize,
) -> Result<Vec<Prediction>> {
    let run_chunk = |records: &[crate::manifest::VideoRecord]| -> Result<Vec<Prediction>> {
        let (model, mut kstore, mut store) = snapshot.restore()?;
        let features: Vec<VideoFeatures<S>> = records
            .iter()
            .map(|r| {
                crate::manifest::load_video_features(
                    r,
                    manifest_dir,
                    &snapshot.dims,
                    &mut kstore,
                    &mut store,
                )
            })
            .collect::<Result<_>>()?;
        infer(&features, &model, &store, selection)
    };
    let workers = n_threads.max(1).min(records.len().max(1));
    if workers <= 1 {
        return run_chunk(records);
    }
    let chunk_size = records.len().div_ceil(workers);
    let chunks: Vec<&[crate::manifest::VideoRecord]> = records.chunks(chunk_size).collect();
    let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| scope.spawn(move || run_chunk(chunk)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inference worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_selection_keeps_scores_at_or_above() {
        let scores = [2.0, -1.0, 0.5];
        assert_eq!(select_labels(&scores, Selection::Threshold(0.0)), vec![0, 2]);
    }

    #[test]
    fn topk_selection_takes_the_best() {
        let scores = [2.0, -1.0, 0.5];
        assert_eq!(select_labels(&scores, Selection::TopK(1)), vec![0]);
        assert_eq!(select_labels(&scores, Selection::TopK(2)), vec![0, 2]);
    }

    #[test]
    fn infinite_threshold_selects_nothing() {
        let scores = [2.0, 1e308, 0.5];
        assert!(select_labels(&scores, Selection::Threshold(f64::INFINITY)).is_empty());
    }

    #[test]
    fn topk_ties_break_by_index() {
        let scores = [1.0, 1.0, 1.0];
        assert_eq!(select_labels(&scores, Selection::TopK(2)), vec![0, 1]);
    }
}
