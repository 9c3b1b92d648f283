use crate::error::{Error, Result};

use super::metrics::{ClassReport, ClassRow};

pub const REPORT_COLUMNS: &str = "class,model,eval_tag,precision,recall,f1,support,predicted_positives";

/// Intra-to-OOD F1 change of one class for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Delta {
    pub class: String,
    pub model: String,
    pub ood_tag: String,
    pub intra_f1: f64,
    pub ood_f1: f64,
}

impl F1Delta {
    /// Positive when the class got worse out of distribution.
    pub fn drop(&self) -> f64 {
        self.intra_f1 - self.ood_f1
    }
}

/// Per-class rows joined across (model, evaluation) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Column groups in first-seen order.
    pub groups: Vec<(String, String)>,
    /// Kept class names in label-map order.
    pub classes: Vec<String>,
    /// `cells[class][group]`.
    pub cells: Vec<Vec<ClassRow>>,
    pub deltas: Vec<F1Delta>,
}

/// Drops no-prediction classes when `omit_unrecognized` is set: a class is
/// removed only if every report predicted it zero times.
pub fn build_report(reports: &[ClassReport], omit_unrecognized: bool) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidConfig("no reports to compare".into()))?;
    let codes: Vec<&str> = first.rows.iter().map(|r| r.code.as_str()).collect();
    for r in reports {
        let other: Vec<&str> = r.rows.iter().map(|r| r.code.as_str()).collect();
        if other != codes {
            return Err(Error::LabelMapMismatch(format!(
                "report {}/{} has {} classes, {}/{} has {}",
                r.model,
                r.eval_tag,
                other.len(),
                first.model,
                first.eval_tag,
                codes.len()
            )));
        }
    }
    let mut groups: Vec<(String, String)> = Vec::new();
    for r in reports {
        let key = (r.model.clone(), r.eval_tag.clone());
        if groups.contains(&key) {
            return Err(Error::InvalidConfig(format!("duplicate report {}/{}", key.0, key.1)));
        }
        groups.push(key);
    }

    let mut classes = Vec::new();
    let mut cells = Vec::new();
    for (ci, row) in first.rows.iter().enumerate() {
        let across: Vec<ClassRow> = reports.iter().map(|r| r.rows[ci].clone()).collect();
        if omit_unrecognized && across.iter().all(|c| c.predicted_positives == 0) {
            continue;
        }
        classes.push(row.class.clone());
        cells.push(across);
    }

    let mut deltas = Vec::new();
    for (gi, (model, tag)) in groups.iter().enumerate() {
        if tag != "intra" {
            continue;
        }
        for (gj, (m2, t2)) in groups.iter().enumerate() {
            if m2 != model || !t2.starts_with("ood") {
                continue;
            }
            for (class, row) in classes.iter().zip(&cells) {
                deltas.push(F1Delta {
                    class: class.clone(),
                    model: model.clone(),
                    ood_tag: t2.clone(),
                    intra_f1: row[gi].f1,
                    ood_f1: row[gj].f1,
                });
            }
        }
    }
    Ok(Comparison { groups, classes, cells, deltas })
}

impl Comparison {
    /// Long-format CSV at full precision.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_COLUMNS}\n");
        for (class, row) in self.classes.iter().zip(&self.cells) {
            for ((model, tag), c) in self.groups.iter().zip(row) {
                s.push_str(&format!(
                    "{class},{model},{tag},{},{},{},{},{}\n",
                    c.precision, c.recall, c.f1, c.support, c.predicted_positives
                ));
            }
        }
        s
    }

    /// Side-by-side table, two decimals, followed by the F1 drops.
    pub fn to_text(&self) -> String {
        let name_w = self.classes.iter().map(String::len).max().unwrap_or(0).max("Diagnosis".len());
        let group_w = 20;
        let mut s = format!("{:<name_w$}", "");
        for (m, t) in &self.groups {
            s.push_str(&format!(" | {:^group_w$}", format!("{m} {t}")));
        }
        s.push('\n');
        s.push_str(&format!("{:<name_w$}", "Diagnosis"));
        for _ in &self.groups {
            s.push_str(&format!(" | {:>6}{:>7}{:>7}", "P", "R", "F1"));
        }
        s.push('\n');
        s.push_str(&"-".repeat(name_w + self.groups.len() * (group_w + 3)));
        s.push('\n');
        for (class, row) in self.classes.iter().zip(&self.cells) {
            s.push_str(&format!("{class:<name_w$}"));
            for c in row {
                s.push_str(&format!(" | {:>6.2}{:>7.2}{:>7.2}", c.precision, c.recall, c.f1));
            }
            s.push('\n');
        }
        if !self.deltas.is_empty() {
            s.push_str("\nF1 change from intra to OOD (* marks a drop of at least 0.05)\n");
            for d in &self.deltas {
                s.push_str(&format!(
                    "{:<name_w$}  {:<12} {:<14} {:>6.2} -> {:>5.2}  {:>+6.2}{}\n",
                    d.class,
                    d.model,
                    d.ood_tag,
                    d.intra_f1,
                    d.ood_f1,
                    // adding 0.0 turns -0.0 into 0.0
                    d.ood_f1 - d.intra_f1 + 0.0,
                    if d.drop() >= 0.05 { " *" } else { "" }
                ));
            }
        }
        s
    }
}

/// Reads the long-format CSV back into reports, one per (model, tag) pair
/// in first-seen order.
pub fn parse_report_csv(text: &str) -> Result<Vec<ClassReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_COLUMNS) {
        return Err(Error::BadFormat(format!("report header must be {REPORT_COLUMNS}")));
    }
    let mut out: Vec<ClassReport> = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::BadFormat(format!("bad report row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::BadFormat(format!("bad number in {line:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::BadFormat(format!("bad count in {line:?}")));
        let row = ClassRow {
            class: f[0].to_string(),
            code: f[0].to_string(),
            precision: num(f[3])?,
            recall: num(f[4])?,
            f1: num(f[5])?,
            support: int(f[6])?,
            predicted_positives: int(f[7])?,
        };
        match out.iter_mut().find(|r| r.model == f[1] && r.eval_tag == f[2]) {
            Some(r) => r.rows.push(row),
            None => out.push(ClassReport { model: f[1].to_string(), eval_tag: f[2].to_string(), rows: vec![row] }),
        }
    }
    Ok(out)
}
