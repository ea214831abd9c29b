//! Per-class precision, recall and F1, fold aggregation and the
//! stratified random baseline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SafetyLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: usize,
    /// Set when nothing was predicted as this class, so precision is 0 by definition.
    pub zero_division: bool,
}

impl ClassMetrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassMetrics {
            precision,
            recall,
            f1: f1(precision, recall),
            support: tp + fn_,
            zero_division: tp + fp == 0,
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Scores of one prediction vector. `confusion[t][p]` counts rows with true
/// class `t` predicted as `p` (0 = safe, 1 = high risk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub confusion: [[usize; 2]; 2],
    pub safe: ClassMetrics,
    pub high_risk: ClassMetrics,
}

impl Score {
    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Self {
        let c = confusion;
        Score {
            confusion,
            safe: ClassMetrics::from_counts(c[0][0], c[1][0], c[0][1]),
            high_risk: ClassMetrics::from_counts(c[1][1], c[0][1], c[1][0]),
        }
    }

    pub fn class(&self, label: SafetyLabel) -> &ClassMetrics {
        match label {
            SafetyLabel::Safe => &self.safe,
            SafetyLabel::HighRisk => &self.high_risk,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        (self.confusion[0][0] + self.confusion[1][1]) as f64 / self.total() as f64
    }

    /// Recall pooled over both classes (TP summed over classes / rows).
    pub fn micro_recall(&self) -> f64 {
        let tp = self.confusion[0][0] + self.confusion[1][1];
        let fn_ = self.confusion[0][1] + self.confusion[1][0];
        tp as f64 / (tp + fn_) as f64
    }
}

pub fn score(y_true: &[u8], y_pred: &[u8]) -> Result<Score> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidInput(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty prediction set".into()));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t > 1 || p > 1 {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        confusion[t as usize][p as usize] += 1;
    }
    Ok(Score::from_confusion(confusion))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn mean<'a>(items: impl Iterator<Item = &'a ClassMetrics>) -> Self {
        let (mut p, mut r, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
        for m in items {
            p += m.precision;
            r += m.recall;
            f += m.f1;
            n += 1;
        }
        let n = n.max(1) as f64;
        Prf {
            precision: p / n,
            recall: r / n,
            f1: f / n,
        }
    }

    fn of(m: &ClassMetrics) -> Self {
        Prf {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }
}

/// Cross-validated metrics: `safe`/`high_risk` are unweighted means over
/// folds; `pooled` scores all test predictions together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub safe: Prf,
    pub high_risk: Prf,
    pub pooled: Score,
    pub pooled_safe: Prf,
    pub pooled_high_risk: Prf,
    pub per_fold: Vec<Score>,
}

impl ClassReport {
    pub fn from_folds(per_fold: Vec<Score>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::InvalidInput("no folds to aggregate".into()));
        }
        let mut confusion = [[0usize; 2]; 2];
        for s in &per_fold {
            for t in 0..2 {
                for p in 0..2 {
                    confusion[t][p] += s.confusion[t][p];
                }
            }
        }
        let pooled = Score::from_confusion(confusion);
        Ok(ClassReport {
            safe: Prf::mean(per_fold.iter().map(|s| &s.safe)),
            high_risk: Prf::mean(per_fold.iter().map(|s| &s.high_risk)),
            pooled_safe: Prf::of(&pooled.safe),
            pooled_high_risk: Prf::of(&pooled.high_risk),
            pooled,
            per_fold,
        })
    }

    pub fn class(&self, label: SafetyLabel) -> &Prf {
        match label {
            SafetyLabel::Safe => &self.safe,
            SafetyLabel::HighRisk => &self.high_risk,
        }
    }
}

/// Closed-form expectation of the random baseline for one class:
/// precision tends to the class's true frequency, recall to its prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineExpectation {
    pub safe: Prf,
    pub high_risk: Prf,
}

fn expectation(prior: f64, truth: f64) -> Prf {
    Prf {
        precision: truth,
        recall: prior,
        f1: f1(truth, prior),
    }
}

/// Predicts i.i.d. labels with `dist = [P(safe), P(high risk)]` and scores
/// them against `y_true`.
pub fn stratified_baseline(dist: [f64; 2], y_true: &[u8], seed: u64) -> Result<(Score, BaselineExpectation)> {
    if dist.iter().any(|p| !(0.0..=1.0).contains(p)) || (dist[0] + dist[1] - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "class distribution {dist:?} does not sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred: Vec<u8> = y_true
        .iter()
        .map(|_| u8::from(rng.random::<f64>() < dist[1]))
        .collect();
    let s = score(y_true, &pred)?;
    let q1 = y_true.iter().filter(|&&l| l == 1).count() as f64 / y_true.len() as f64;
    Ok((
        s,
        BaselineExpectation {
            safe: expectation(dist[0], 1.0 - q1),
            high_risk: expectation(dist[1], q1),
        },
    ))
}

/// Training class distribution `[P(safe), P(high risk)]` of 0/1 labels.
pub fn class_distribution(y: &[u8]) -> [f64; 2] {
    let p1 = y.iter().filter(|&&l| l == 1).count() as f64 / y.len().max(1) as f64;
    [1.0 - p1, p1]
}

/// One table row group: a feature set's model report and its baseline.
pub struct TableEntry<'a> {
    pub feature_set: &'a str,
    pub model: &'a ClassReport,
    pub baseline: &'a ClassReport,
}

/// Aligned text table, one line per class and feature set, baseline values
/// in parentheses.
pub fn render_table(entries: &[TableEntry<'_>]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<12} {:>15} {:>15} {:>15}",
        "class", "features", "precision", "recall", "f1"
    );
    for label in [SafetyLabel::HighRisk, SafetyLabel::Safe] {
        for e in entries {
            let m = e.model.class(label);
            let b = e.baseline.class(label);
            let cell = |x: f64, y: f64| format!("{x:.2} ({y:.2})");
            let _ = writeln!(
                out,
                "{:<10} {:<12} {:>15} {:>15} {:>15}",
                label.as_str(),
                e.feature_set,
                cell(m.precision, b.precision),
                cell(m.recall, b.recall),
                cell(m.f1, b.f1)
            );
        }
    }
    out
}
