//! Confusion counts and precision / recall / accuracy / F1.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{FaetError, Result};

/// Counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts `(prediction, label)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, label) in pairs {
            match (pred == 1, label == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with the classes swapped.
    pub fn flipped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    #[serde(rename = "macro")]
    pub macro_avg: ClassMetrics,
    pub micro: ClassMetrics,
    /// Quantities whose denominator was zero and were reported as 0.
    pub zero_division: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64, name: &str, flags: &mut Vec<String>) -> f64 {
    if p + r == 0.0 {
        flags.push(name.to_string());
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn class_metrics(c: &ConfusionCounts, class: &str, flags: &mut Vec<String>) -> ClassMetrics {
    let precision = ratio(c.tp, c.tp + c.fp, &format!("{class}.precision"), flags);
    let recall = ratio(c.tp, c.tp + c.fn_, &format!("{class}.recall"), flags);
    let f1 = f1(precision, recall, &format!("{class}.f1"), flags);
    ClassMetrics { precision, recall, f1 }
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        if counts.total() == 0 {
            return Err(FaetError::Data("no documents to evaluate".into()));
        }
        let mut flags = Vec::new();
        let positive = class_metrics(&counts, "positive", &mut flags);
        let negative = class_metrics(&counts.flipped(), "negative", &mut flags);
        let accuracy = (counts.tp + counts.tn) as f64 / counts.total() as f64;
        let macro_p = (positive.precision + negative.precision) / 2.0;
        let macro_r = (positive.recall + negative.recall) / 2.0;
        let macro_avg = ClassMetrics {
            precision: macro_p,
            recall: macro_r,
            f1: (positive.f1 + negative.f1) / 2.0,
        };
        // Pooled over both classes every error is one FP and one FN, so
        // micro precision and recall both reduce to accuracy.
        let micro = ClassMetrics {
            precision: accuracy,
            recall: accuracy,
            f1: accuracy,
        };
        Ok(MetricsReport {
            counts,
            accuracy,
            positive,
            negative,
            macro_avg,
            micro,
            zero_division: flags,
        })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<Self> {
        Self::from_counts(ConfusionCounts::from_pairs(pairs))
    }
}
