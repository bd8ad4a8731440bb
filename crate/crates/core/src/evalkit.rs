//! Accuracy, macro-F1, confusion matrices and ablation deltas.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no predictions to score")]
    Empty,
    #[error("cannot compare reports from different contexts ({0} vs {1})")]
    ContextMismatch(String, String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, pred: Label, gold: Label) {
        match (pred, gold) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }
}

/// Counts `(prediction, gold)` pairs with the harmful class as positive.
pub fn confusion(pairs: &[(Label, Label)]) -> Result<ConfusionMatrix, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut m = ConfusionMatrix::default();
    for &(p, g) in pairs {
        m.record(p, g);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_positive: f64,
    pub f1_negative: f64,
    pub macro_f1: f64,
    pub matrix: ConfusionMatrix,
    pub extraction_failure_count: u64,
}

fn f1(hit: u64, miss_a: u64, miss_b: u64) -> f64 {
    let denom = 2 * hit + miss_a + miss_b;
    if denom == 0 {
        0.0
    } else {
        (2 * hit) as f64 / denom as f64
    }
}

pub fn metrics(matrix: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = matrix.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let f1_positive = f1(matrix.tp, matrix.fp, matrix.fn_);
    let f1_negative = f1(matrix.tn, matrix.fn_, matrix.fp);
    Ok(MetricsReport {
        accuracy: (matrix.tp + matrix.tn) as f64 / total as f64,
        f1_positive,
        f1_negative,
        macro_f1: (f1_positive + f1_negative) / 2.0,
        matrix: *matrix,
        extraction_failure_count: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline_id: String,
    pub variant_id: String,
    /// Percentage points.
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

/// Signed difference in percentage points, `variant - baseline`.
pub fn delta(
    variant_id: &str,
    variant: &MetricsReport,
    baseline_id: &str,
    baseline: &MetricsReport,
) -> DeltaReport {
    DeltaReport {
        baseline_id: baseline_id.to_string(),
        variant_id: variant_id.to_string(),
        delta_accuracy: (variant.accuracy - baseline.accuracy) * 100.0,
        delta_macro_f1: (variant.macro_f1 - baseline.macro_f1) * 100.0,
    }
}

/// Arithmetic mean over perturbation runs. `None` for an empty slice.
pub fn mean_delta(deltas: &[DeltaReport]) -> Option<(f64, f64)> {
    if deltas.is_empty() {
        return None;
    }
    let n = deltas.len() as f64;
    Some((
        deltas.iter().map(|d| d.delta_accuracy).sum::<f64>() / n,
        deltas.iter().map(|d| d.delta_macro_f1).sum::<f64>() / n,
    ))
}

/// A fraction rendered as percentage points with two decimals.
pub fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Markdown table in the Acc./F1 layout, one row per `(label, report)`.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("| Setting | Acc. | F1 | Extraction failures |\n|---|---:|---:|---:|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            name,
            pct(r.accuracy),
            pct(r.macro_f1),
            r.extraction_failure_count
        ));
    }
    out
}
