//! Classification metrics (accuracy, macro sensitivity/specificity/F1,
//! macro ROC AUC) and the student-teacher relation distance.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::relation::{check_aligned, RelationMatrix};
use crate::tensor::Tensor;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ClassCounts {
    /// `None` when the class has no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (self.tp + self.fn_ > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionSummary {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub per_class: Vec<ClassCounts>,
    /// Classes with no positive label, left out of the macro averages.
    pub skipped_classes: Vec<usize>,
}

fn macro_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize(accuracy: f64, per_class: Vec<ClassCounts>) -> ConfusionSummary {
    let present: Vec<&ClassCounts> = per_class.iter().filter(|c| c.tp + c.fn_ > 0).collect();
    let skipped_classes = per_class
        .iter()
        .enumerate()
        .filter(|(_, c)| c.tp + c.fn_ == 0)
        .map(|(i, _)| i)
        .collect();
    ConfusionSummary {
        accuracy,
        sensitivity: macro_mean(present.iter().filter_map(|c| c.sensitivity())),
        specificity: macro_mean(present.iter().filter_map(|c| c.specificity())),
        f1: macro_mean(present.iter().filter_map(|c| c.f1())),
        per_class,
        skipped_classes,
    }
}

/// Single-label metrics from predicted and true class indices.
pub fn confusion_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionSummary> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&k| k >= classes) {
        return Err(Error::contract(format!("class {bad} outside [0, {classes})")));
    }
    let mut per_class = vec![ClassCounts::default(); classes];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            correct += 1;
        }
        for (k, c) in per_class.iter_mut().enumerate() {
            match (p == k, y == k) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(summarize(correct as f64 / labels.len() as f64, per_class))
}

/// Multi-label metrics; accuracy is the fraction of matching label bits.
pub fn confusion_metrics_multilabel(predictions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<ConfusionSummary> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract("prediction/label count mismatch"));
    }
    let classes = labels[0].len();
    let mut per_class = vec![ClassCounts::default(); classes];
    let mut correct = 0;
    for (p, y) in predictions.iter().zip(labels) {
        if p.len() != classes || y.len() != classes {
            return Err(Error::contract("ragged label bit vectors"));
        }
        for (k, c) in per_class.iter_mut().enumerate() {
            if p[k] == y[k] {
                correct += 1;
            }
            match (p[k], y[k]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(summarize(correct as f64 / (labels.len() * classes) as f64, per_class))
}

/// Normalized Mann-Whitney U: `P(s_pos > s_neg) + ½·P(s_pos = s_neg)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract("score/label count mismatch"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, with ties sharing the average rank; kept
    // in integers so the statistic is exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, average (i + j + 2) / 2
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / 2.0 / (n_pos * n_neg as u128) as f64)
}

/// Unweighted mean of per-class one-vs-rest AUCs over probability columns;
/// classes with only one outcome are skipped. Returns the mean and the
/// per-class values.
pub fn macro_auc(probs: &Tensor, targets: &[Vec<bool>]) -> Result<(f64, Vec<Option<f64>>)> {
    let (n, c) = probs.expect_matrix("macro_auc")?;
    if targets.len() != n {
        return Err(Error::contract("probability/target count mismatch"));
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let scores: Vec<f64> = (0..n).map(|i| probs.get(i, k)).collect();
        let labels: Vec<bool> = targets.iter().map(|t| t[k]).collect();
        per_class.push(match auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("no class has both outcomes".into()));
    }
    Ok((macro_mean(defined.into_iter()), per_class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassMetrics {
    pub sensitivity: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// NaN when undefined (e.g. a single-class evaluation set).
    pub auc: f64,
    pub f1: f64,
    pub per_class: PerClassMetrics,
    pub n_samples: usize,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full report from class probabilities `[N × c]`.
pub fn evaluate(probs: &Tensor, labels: &Labels) -> Result<MetricsReport> {
    let (n, c) = probs.expect_matrix("evaluate")?;
    if labels.len() != n || labels.classes() != c {
        return Err(Error::Shape {
            op: "evaluate",
            left: probs.shape().to_vec(),
            right: vec![labels.len(), labels.classes()],
        });
    }
    let (summary, targets) = match labels {
        Labels::Single { labels, .. } => {
            let preds: Vec<usize> = (0..n).map(|i| argmax(probs.row(i))).collect();
            let targets: Vec<Vec<bool>> = labels.iter().map(|&y| (0..c).map(|k| k == y).collect()).collect();
            (confusion_metrics(&preds, labels, c)?, targets)
        }
        Labels::Multi { bits, .. } => {
            let preds: Vec<Vec<bool>> = (0..n).map(|i| probs.row(i).iter().map(|&p| p >= 0.5).collect()).collect();
            (confusion_metrics_multilabel(&preds, bits)?, bits.clone())
        }
    };
    let (auc_value, auc_per_class) = match macro_auc(probs, &targets) {
        Ok(v) => v,
        Err(Error::Undefined(_)) => (f64::NAN, vec![None; c]),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy: summary.accuracy,
        sensitivity: summary.sensitivity,
        specificity: summary.specificity,
        auc: auc_value,
        f1: summary.f1,
        per_class: PerClassMetrics {
            sensitivity: summary.per_class.iter().map(ClassCounts::sensitivity).collect(),
            specificity: summary.per_class.iter().map(ClassCounts::specificity).collect(),
            f1: summary.per_class.iter().map(ClassCounts::f1).collect(),
            auc: auc_per_class,
        },
        n_samples: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDistance {
    /// Mean of `|R_s − R_t|` over all entries.
    pub mean_abs: f64,
    /// `|R_s − R_t|` entrywise.
    pub diff: Tensor,
}

pub fn relation_distance(r_student: &RelationMatrix, r_teacher: &RelationMatrix) -> Result<RelationDistance> {
    check_aligned(&r_student.batch_ids, &r_teacher.batch_ids)?;
    let diff = r_student.values.sub(&r_teacher.values)?.map(f64::abs);
    Ok(RelationDistance {
        mean_abs: diff.sum() / diff.len() as f64,
        diff,
    })
}
