//! Classification metrics: accuracy, F1, AUC, recall, precision, all derived
//! from raw predictions plus a confusion-count table.
//!
//! AUC is the probability of correct ranking over all positive-negative
//! pairs (ties count one half), computed through tie-averaged ranks so it
//! matches the brute-force pairwise definition exactly.

use crate::error::{Error, Result};

/// How F1 / recall / precision aggregate over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Unweighted mean of per-class scores.
    #[default]
    Macro,
    /// Scores of class 1 only.
    BinaryPositive,
}

/// The five evaluation metrics plus the confusion counts behind them.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Accuracy in percent.
    pub acc: f64,
    pub f1: f64,
    /// `None` when the dataset has a single class (AUC undefined).
    pub auc: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    /// Row-major `confusion[true * n_classes + predicted]`.
    pub confusion: Vec<u64>,
    pub n_classes: usize,
}

impl MetricsReport {
    /// Machine-parseable key=value lines, exactly the five metric keys.
    pub fn to_key_values(&self) -> String {
        format!(
            "acc={:.2}\nf1={:.4}\nauc={}\nrecall={:.4}\nprecision={:.4}\n",
            self.acc,
            self.f1,
            match self.auc {
                Some(a) => format!("{a:.4}"),
                None => "undefined".to_string(),
            },
            self.recall,
            self.precision,
        )
    }
}

/// Ranking AUC of `scores` against binary labels (positive class = 1).
/// Returns `None` if either class is absent.
pub fn auc_rank(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // tie-averaged ranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p_f = p as f64;
    let n_f = n as f64;
    Some((rank_sum_pos - p_f * (p_f + 1.0) / 2.0) / (p_f * n_f))
}

/// Builds the full report from per-item predictions and class-1 scores.
pub fn metrics_from_predictions(
    labels: &[usize],
    predictions: &[usize],
    scores: &[f64],
    n_classes: usize,
    averaging: Averaging,
) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("metrics need at least one item"));
    }
    if labels.len() != predictions.len() || labels.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "metrics inputs",
            expected: labels.len(),
            got: predictions.len().min(scores.len()),
        });
    }
    let mut confusion = vec![0u64; n_classes * n_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                n_classes,
            });
        }
        confusion[t * n_classes + p] += 1;
    }
    let correct: u64 = (0..n_classes).map(|c| confusion[c * n_classes + c]).sum();
    let acc = 100.0 * correct as f64 / labels.len() as f64;

    let per_class = |c: usize| -> (f64, f64, f64) {
        let tp = confusion[c * n_classes + c] as f64;
        let fp: f64 = (0..n_classes)
            .filter(|&t| t != c)
            .map(|t| confusion[t * n_classes + c] as f64)
            .sum();
        let fn_: f64 = (0..n_classes)
            .filter(|&p| p != c)
            .map(|p| confusion[c * n_classes + p] as f64)
            .sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1)
    };
    let (precision, recall, f1) = match averaging {
        Averaging::Macro => {
            let mut acc3 = (0.0, 0.0, 0.0);
            for c in 0..n_classes {
                let (p, r, f) = per_class(c);
                acc3 = (acc3.0 + p, acc3.1 + r, acc3.2 + f);
            }
            let k = n_classes as f64;
            (acc3.0 / k, acc3.1 / k, acc3.2 / k)
        }
        Averaging::BinaryPositive => per_class(1),
    };
    let auc = if n_classes == 2 {
        auc_rank(scores, labels)
    } else {
        None
    };
    Ok(MetricsReport {
        acc,
        f1,
        auc,
        recall,
        precision,
        confusion,
        n_classes,
    })
}
