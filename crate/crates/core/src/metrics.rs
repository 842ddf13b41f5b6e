//! Classification and ranking metrics over `(score, label)` pairs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Decision threshold for accuracy and F1.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub aupr: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn at(scores: &[(f64, bool)], threshold: f64) -> Self {
        let mut c = Self::default();
        for &(s, y) in scores {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / n as f64
    }

    /// Zero when there are no positive predictions and no positive labels.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        (2 * self.tp) as f64 / denom as f64
    }
}

fn descending(a: &(f64, bool), b: &(f64, bool)) -> Ordering {
    b.0.total_cmp(&a.0)
}

/// Probability that a random positive outscores a random negative, ties counted half.
pub fn auc(scores: &[(f64, bool)]) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = sorted.iter().filter(|s| s.1).count() as u64;
    let neg = sorted.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Twice the number of winning pairs plus tied pairs, kept in integers.
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let j = i + sorted[i..].iter().take_while(|s| s.0 == sorted[i].0).count();
        let p = sorted[i..j].iter().filter(|s| s.1).count() as u64;
        let n = (j - i) as u64 - p;
        doubled += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Some(doubled as f64 / (2 * pos * neg) as f64)
}

/// Average precision: mean over positives of the precision at that positive's score.
///
/// Tied scores share a threshold. Terms are accumulated in descending score order.
pub fn average_precision(scores: &[(f64, bool)]) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(descending);
    let pos = sorted.iter().filter(|s| s.1).count();
    if pos == 0 || pos == sorted.len() {
        return None;
    }
    let mut total = 0.0;
    let mut tp = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let j = i + sorted[i..].iter().take_while(|s| s.0 == sorted[i].0).count();
        let p = sorted[i..j].iter().filter(|s| s.1).count();
        tp += p as u64;
        let precision = tp as f64 / j as f64;
        for _ in 0..p {
            total += precision;
        }
        i = j;
    }
    Some(total / pos as f64)
}

pub fn evaluate_metrics(scores: &[(f64, bool)]) -> Metrics {
    let c = Confusion::at(scores, THRESHOLD);
    Metrics { accuracy: c.accuracy(), f1: c.f1(), auc: auc(scores), aupr: average_precision(scores) }
}
