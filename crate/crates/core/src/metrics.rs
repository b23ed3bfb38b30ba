//! Evaluation metrics: micro-averaged F1 over (video, label) pairs and
//! RP@target — the largest fraction of videos that stay labelled once the
//! decision threshold is raised until per-video exact-precision accuracy
//! among labelled videos reaches the target.

use serde::Serialize;

use crate::error::{Error, Result};

/// Pooled micro-averaged precision/recall/F1. Predictions and truth are
/// per-video label index sets over the same label universe.
pub fn micro_f1(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (pred, gt) in predicted.iter().zip(truth) {
        for p in pred {
            if gt.contains(p) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for t in gt {
            if !pred.contains(t) {
                fn_ += 1;
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (f1, precision, recall)
}

/// Sweeps the threshold over the descending distinct scores. At each
/// threshold a video is labelled iff some score clears it and accurate iff
/// every cleared label is in its ground truth. Returns the maximum labelled
/// fraction whose accuracy meets `target`, with the threshold that attains
/// it, or `(0, +inf)` when no threshold qualifies.
pub fn rp_at_accuracy(
    scores: &[Vec<f64>],
    truth: &[Vec<usize>],
    target: f64,
) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Contract("rp_at_accuracy over an empty dataset".into()));
    }
    if scores.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} score rows vs {} truth rows",
            scores.len(),
            truth.len()
        )));
    }
    let mut candidates: Vec<f64> = scores.iter().flatten().copied().collect();
    candidates.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    candidates.dedup();

    let n = scores.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for &tau in &candidates {
        let mut labelled = 0usize;
        let mut accurate = 0usize;
        for (row, gt) in scores.iter().zip(truth) {
            let selected: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= tau)
                .map(|(i, _)| i)
                .collect();
            if selected.is_empty() {
                continue;
            }
            labelled += 1;
            if selected.iter().all(|i| gt.contains(i)) {
                accurate += 1;
            }
        }
        if labelled == 0 {
            continue;
        }
        let accuracy = accurate as f64 / labelled as f64;
        if accuracy >= target {
            let coverage = labelled as f64 / n;
            if best.map_or(true, |(c, _)| coverage > c) {
                best = Some((coverage, tau));
            }
        }
    }
    Ok(best.unwrap_or((0.0, f64::INFINITY)))
}

/// Full evaluation summary over one prediction set.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub micro_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub rp90_coverage: f64,
    pub rp90_threshold: f64,
    pub level1_micro_f1: f64,
    pub level1_precision: f64,
    pub level1_recall: f64,
    pub videos: usize,
    pub labels_level1: usize,
    pub labels_level2: usize,
}

impl MetricReport {
    /// Line-oriented `metric=value` form, the human/file twin of the JSON.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("micro_f1={:.6}\n", self.micro_f1));
        out.push_str(&format!("precision={:.6}\n", self.precision));
        out.push_str(&format!("recall={:.6}\n", self.recall));
        out.push_str(&format!("rp90_coverage={:.6}\n", self.rp90_coverage));
        out.push_str(&format!("rp90_threshold={}\n", self.rp90_threshold));
        out.push_str(&format!("level1_micro_f1={:.6}\n", self.level1_micro_f1));
        out.push_str(&format!("level1_precision={:.6}\n", self.level1_precision));
        out.push_str(&format!("level1_recall={:.6}\n", self.level1_recall));
        out.push_str(&format!("videos={}\n", self.videos));
        out.push_str(&format!("labels_level1={}\n", self.labels_level1));
        out.push_str(&format!("labels_level2={}\n", self.labels_level2));
        out
    }

    pub fn validate_rates(&self) -> Result<()> {
        for (name, v) in [
            ("micro_f1", self.micro_f1),
            ("precision", self.precision),
            ("recall", self.recall),
            ("rp90_coverage", self.rp90_coverage),
            ("level1_micro_f1", self.level1_micro_f1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![vec![0, 2], vec![1], vec![3, 4]];
        let (f1, p, r) = micro_f1(&truth, &truth);
        assert_eq!((f1, p, r), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_predictions_score_zero_by_convention() {
        let pred = vec![vec![], vec![]];
        let truth = vec![vec![0], vec![1, 2]];
        let (f1, p, r) = micro_f1(&pred, &truth);
        assert_eq!((f1, p, r), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_everything_scores_zero() {
        let empty: Vec<Vec<usize>> = vec![vec![], vec![]];
        let (f1, _, _) = micro_f1(&empty, &empty);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn hand_counted_case() {
        // v0: pred {0,1}, truth {0}: tp 1, fp 1.
        // v1: pred {2},   truth {2,3}: tp 1, fn 1.
        let pred = vec![vec![0, 1], vec![2]];
        let truth = vec![vec![0], vec![2, 3]];
        let (f1, p, r) = micro_f1(&pred, &truth);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn separable_scores_give_full_coverage() {
        // Top score of every video is correct; positives clear negatives.
        let scores = vec![
            vec![2.0, -1.0, -1.5],
            vec![-0.5, 3.0, -2.0],
            vec![-1.0, -2.0, 1.5],
        ];
        let truth = vec![vec![0], vec![1], vec![2]];
        let (coverage, tau) = rp_at_accuracy(&scores, &truth, 0.9).unwrap();
        assert_eq!(coverage, 1.0);
        assert!(tau <= 1.5);
    }

    #[test]
    fn hopeless_scores_give_zero_and_infinity() {
        // Every video's top score is wrong.
        let scores = vec![vec![5.0, 0.0], vec![4.0, 0.0]];
        let truth = vec![vec![1], vec![1]];
        let (coverage, tau) = rp_at_accuracy(&scores, &truth, 0.9).unwrap();
        assert_eq!(coverage, 0.0);
        assert!(tau.is_infinite());
    }

    #[test]
    fn coverage_monotone_in_target() {
        let scores = vec![
            vec![3.0, 1.0],
            vec![2.5, 2.6],
            vec![1.0, 0.5],
            vec![0.2, 2.2],
        ];
        let truth = vec![vec![0], vec![0], vec![0], vec![0]];
        let mut last = f64::INFINITY;
        for target in [0.1, 0.5, 0.75, 0.9, 1.0] {
            let (coverage, _) = rp_at_accuracy(&scores, &truth, target).unwrap();
            assert!(coverage <= last, "coverage rose at target {target}");
            last = coverage;
        }
    }

    #[test]
    fn empty_dataset_is_contract_error() {
        assert!(rp_at_accuracy(&[], &[], 0.9).is_err());
    }
}
