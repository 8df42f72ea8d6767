//! Ranking and classification metrics, and sensitivity-targeted threshold
//! calibration.
//!
//! Ties are handled by mid-rank throughout. A score is predicted positive iff
//! it is `>= threshold`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ProbVector;

fn check_scores(scores: &[f64], labels_len: usize) -> Result<()> {
    if scores.len() != labels_len {
        return Err(Error::Dimension {
            expected: scores.len(),
            actual: labels_len,
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    Ok(())
}

/// Indices sorted by ascending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Area under the ROC curve: `P(s+ > s-) + P(s+ = s-) / 2`.
///
/// Computed from doubled mid-ranks in integer arithmetic, so the result is
/// the exact ratio `(2 * concordant + ties) / (2 * P * N)` rounded once.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("roc_auc needs both classes".into()));
    }
    let mut start: u128 = 0;
    let mut rank2_pos: u128 = 0;
    for g in tie_groups(scores, false) {
        let m = g.len() as u128;
        let p = g.iter().filter(|&&i| labels[i]).count() as u128;
        // Doubled mid-rank of a 1-based run [start + 1, start + m].
        rank2_pos += p * (2 * start + m + 1);
        start += m;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let numerator = rank2_pos - np * (np + 1);
    Ok(numerator as f64 / (2 * np * nn) as f64)
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `labels`.
pub fn macro_ovr_auc(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension {
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    let k = probs.first().map_or(0, Vec::len);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!("label {bad} outside {k} classes")));
    }
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::InvalidInput("macro_ovr_auc needs at least two classes".into()));
    }
    let mut total = 0.0;
    for &c in &present {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += roc_auc(&scores, &bin)?;
    }
    Ok(total / present.len() as f64)
}

/// ROC AUC of the class-1 score for two classes, macro one-vs-rest AUC
/// otherwise.
pub fn auc_for(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.first().is_some_and(|p| p.len() == 2) {
        if probs.len() != labels.len() {
            return Err(Error::Dimension {
                expected: probs.len(),
                actual: labels.len(),
            });
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return roc_auc(&scores, &bin);
    }
    macro_ovr_auc(probs, labels)
}

/// Average precision `sum (R_i - R_{i-1}) P_i` over the descending sweep,
/// with tied scores forming one cut.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::InvalidInput("auprc needs at least one positive".into()));
    }
    let (mut tp, mut seen) = (0u64, 0u64);
    let mut ap = 0.0;
    for g in tie_groups(scores, true) {
        let p = g.iter().filter(|&&i| labels[i]).count() as u64;
        seen += g.len() as u64;
        if p > 0 {
            tp += p;
            ap += (p as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// ROC staircase from `(0, 0)` to `(1, 1)`; a run of tied scores yields one
/// diagonal step.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_scores(scores, labels.len())?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("roc_points needs both classes".into()));
    }
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in tie_groups(scores, true) {
        let p = g.iter().filter(|&&i| labels[i]).count() as u64;
        tp += p;
        fp += g.len() as u64 - p;
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(pts)
}

/// Trapezoid area under a polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], class_names: &[&str]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Dimension {
                expected: labels.len(),
                actual: preds.len(),
            });
        }
        let k = class_names.len();
        let mut counts = vec![vec![0u64; k]; k];
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= k || t >= k {
                return Err(Error::InvalidInput(format!("class id outside {k} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix {
            counts,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            total: preds.len() as u64,
        })
    }

    /// Binary matrix from its four cells; class 1 is the positive class.
    pub fn binary(tp: u64, fn_: u64, fp: u64, tn: u64, class_names: [&str; 2]) -> Self {
        ConfusionMatrix {
            counts: vec![vec![tn, fp], vec![fn_, tp]],
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            total: tp + fn_ + fp + tn,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// True when the class was never predicted, so precision is reported 0.
    pub never_predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ClassificationReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let k = cm.n_classes();
        let classes: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = cm.counts[c][c];
                let support: u64 = cm.counts[c].iter().sum();
                let predicted: u64 = (0..k).map(|t| cm.counts[t][c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    name: cm.class_names[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                    never_predicted: predicted == 0,
                }
            })
            .collect();
        let correct: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
        let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k.max(1) as f64;
        ClassificationReport {
            accuracy: ratio(correct, cm.total),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            total: cm.total,
            classes,
        }
    }

    /// Plain-text table with values rounded half-up to 2 decimals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>6} {:>6} {:>8}\n", "Class", "Prec.", "Rec.", "F1", "Supp.");
        for c in &self.classes {
            out += &format!(
                "{:<12} {:>6.2} {:>6.2} {:>6.2} {:>8}\n",
                c.name,
                round_half_up(c.precision, 2),
                round_half_up(c.recall, 2),
                round_half_up(c.f1, 2),
                c.support
            );
        }
        out += &format!(
            "{:<12} {:>6} {:>6} {:>6.2} {:>8}\n",
            "Accuracy",
            "",
            "",
            round_half_up(self.accuracy, 2),
            self.total
        );
        out
    }
}

pub fn classification_report(
    preds: &[usize],
    labels: &[usize],
    class_names: &[&str],
) -> Result<ClassificationReport> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("classification_report needs at least one sample".into()));
    }
    Ok(ClassificationReport::from_confusion(&ConfusionMatrix::new(
        preds,
        labels,
        class_names,
    )?))
}

/// Round half away from zero at `digits` decimals. A relative nudge absorbs
/// binary representation error for values printed exactly at a half.
pub fn round_half_up(x: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    let y = x * scale;
    let nudged = y + y.signum() * 1e-9 * y.abs().max(1.0);
    (nudged.abs() + 0.5).floor() * y.signum() / scale
}

/// Counts at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = BinaryCounts {
            tp: 0,
            fn_: 0,
            fp: 0,
            tn: 0,
        };
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (false, true) => c.fn_ += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn confusion(&self, class_names: [&str; 2]) -> ConfusionMatrix {
        ConfusionMatrix::binary(self.tp, self.fn_, self.fp, self.tn, class_names)
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: f64,
    pub target_sensitivity: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub fn_at_threshold: u64,
    pub fn_at_default: u64,
    /// `100 * (FN(0.5) - FN(tau)) / FN(0.5)`; 0 when FN(0.5) is 0.
    pub missed_case_reduction_pct: f64,
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// Largest threshold whose sensitivity on `(scores, labels)` is at least
/// `target`. Sensitivity only changes at positive scores, so the answer is a
/// positive score, or just above the maximum score when `target` is 0.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool], target: f64) -> Result<ThresholdPolicy> {
    check_scores(scores, labels.len())?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidParam(format!("target sensitivity {target} outside [0, 1]")));
    }
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("calibrate_threshold needs both classes".into()));
    }
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    pos.sort_by(|a, b| b.total_cmp(a));
    let max_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut threshold = next_up(max_score);
    if target > 0.0 {
        for (i, &s) in pos.iter().enumerate() {
            if i + 1 < pos.len() && pos[i + 1] == s {
                continue;
            }
            // Positives scoring >= s are exactly pos[..=i].
            if (i + 1) as f64 / n_pos as f64 >= target {
                threshold = s;
                break;
            }
        }
    }
    let at = BinaryCounts::at(scores, labels, threshold);
    let base = BinaryCounts::at(scores, labels, DEFAULT_THRESHOLD);
    Ok(ThresholdPolicy {
        threshold,
        target_sensitivity: target,
        sensitivity: at.sensitivity(),
        specificity: at.specificity(),
        fn_at_threshold: at.fn_,
        fn_at_default: base.fn_,
        missed_case_reduction_pct: reduction_pct(base.fn_, at.fn_),
    })
}

pub fn reduction_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before as f64 - after as f64) / before as f64
    }
}
