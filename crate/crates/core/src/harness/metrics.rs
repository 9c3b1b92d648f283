use crate::error::{Error, Result};

use super::labels::LabelMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: String,
    pub code: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth positives.
    pub support: usize,
    pub predicted_positives: usize,
}

/// Per-class metrics of one model on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub model: String,
    /// `intra`, `ood` or `ood:<domain>`.
    pub eval_tag: String,
    pub rows: Vec<ClassRow>,
}

/// Confusion counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Rounds to two decimals for display and comparison.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn confusion_counts(predictions: &[Vec<bool>], truths: &[Vec<bool>], classes: usize) -> Result<Vec<Counts>> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction rows vs {} truth rows",
            predictions.len(),
            truths.len()
        )));
    }
    let mut counts = vec![Counts::default(); classes];
    for (p, t) in predictions.iter().zip(truths) {
        if p.len() != classes || t.len() != classes {
            return Err(Error::ShapeMismatch(format!(
                "row widths {} and {}, expected {classes}",
                p.len(),
                t.len()
            )));
        }
        for (c, (&pp, &tt)) in counts.iter_mut().zip(p.iter().zip(t)) {
            match (pp, tt) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

pub fn compute_class_metrics(
    predictions: &[Vec<bool>],
    truths: &[Vec<bool>],
    map: &LabelMap,
    model: &str,
    eval_tag: &str,
) -> Result<ClassReport> {
    let counts = confusion_counts(predictions, truths, map.len())?;
    let rows = map
        .classes()
        .iter()
        .zip(counts)
        .map(|(cls, c)| {
            let (p, r) = (c.precision(), c.recall());
            ClassRow {
                class: cls.name.clone(),
                code: cls.code.clone(),
                precision: p,
                recall: r,
                f1: f1_score(p, r),
                support: c.tp + c.fn_,
                predicted_positives: c.tp + c.fp,
            }
        })
        .collect();
    Ok(ClassReport { model: model.to_string(), eval_tag: eval_tag.to_string(), rows })
}
