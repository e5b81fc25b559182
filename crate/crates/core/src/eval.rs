//! Multilabel scoring of feedback reports against injected ground truth, and
//! per-case latency statistics from a run log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::agents::{ErrorType, FeedbackReport};
use crate::dataset::Truth;
use crate::gateway::LogRecord;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no truth for case `{0}`")]
    MissingTruth(String),
    #[error("unknown label `{label}` in truth for case `{case}`")]
    UnknownLabel { case: String, label: String },
    #[error("cannot score an empty label matrix")]
    Empty,
}

/// Binary indicator matrices, one row per case, one column per label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub cases: Vec<String>,
    pub labels: Vec<ErrorType>,
    pub y_true: Vec<Vec<u8>>,
    pub y_pred: Vec<Vec<u8>>,
}

impl LabelMatrix {
    pub fn new(cases: Vec<String>, y_true: Vec<Vec<u8>>, y_pred: Vec<Vec<u8>>) -> Self {
        let labels = ErrorType::LABELS.to_vec();
        assert_eq!(cases.len(), y_true.len(), "one truth row per case");
        assert_eq!(cases.len(), y_pred.len(), "one prediction row per case");
        for row in y_true.iter().chain(&y_pred) {
            assert_eq!(row.len(), labels.len(), "one column per label");
            assert!(row.iter().all(|&v| v <= 1), "entries are 0 or 1");
        }
        Self {
            cases,
            labels,
            y_true,
            y_pred,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

fn indicator(types: impl IntoIterator<Item = ErrorType>) -> Vec<u8> {
    let mut row = vec![0; ErrorType::LABELS.len()];
    for t in types {
        if let Some(k) = ErrorType::LABELS.iter().position(|l| *l == t) {
            row[k] = 1;
        }
    }
    row
}

/// Rows follow the order of `reports`; keys are variant ids.
pub fn build_matrix<'a, S: AsRef<str>>(
    reports: impl IntoIterator<Item = (S, &'a FeedbackReport)>,
    truths: &BTreeMap<String, Truth>,
) -> Result<LabelMatrix, EvalError> {
    let (mut cases, mut y_true, mut y_pred) = (Vec::new(), Vec::new(), Vec::new());
    for (id, report) in reports {
        let id = id.as_ref();
        let truth = truths
            .get(id)
            .ok_or_else(|| EvalError::MissingTruth(id.to_string()))?;
        let mut types = Vec::with_capacity(truth.injected.len());
        for entry in &truth.injected {
            match ErrorType::parse(&entry.error_type) {
                Some(t) if t != ErrorType::None => types.push(t),
                _ => {
                    return Err(EvalError::UnknownLabel {
                        case: id.to_string(),
                        label: entry.error_type.clone(),
                    })
                }
            }
        }
        cases.push(id.to_string());
        y_true.push(indicator(types));
        y_pred.push(indicator(report.consolidated_error_types.iter().copied()));
    }
    Ok(LabelMatrix::new(cases, y_true, y_pred))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50_ms: u64,
    pub p95_ms: u64,
    pub n_calls: usize,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_cases: usize,
    pub subset_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub hamming_loss: f64,
    pub per_label: IndexMap<ErrorType, LabelMetrics>,
    pub latency: LatencySummary,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(m: &LabelMatrix) -> Result<MetricsReport, EvalError> {
    if m.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = m.cases.len();
    let rows = || m.y_true.iter().zip(&m.y_pred);
    let exact = rows().filter(|(t, p)| t == p).count();
    let wrong: usize = rows()
        .map(|(t, p)| t.iter().zip(p).filter(|(a, b)| a != b).count())
        .sum();

    let mut per_label = IndexMap::new();
    for (k, label) in m.labels.iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (t, p) in rows() {
            match (t[k], p[k]) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => {}
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_label.insert(
            *label,
            LabelMetrics {
                precision,
                recall,
                f1,
                support: tp + fn_,
            },
        );
    }
    let macro_avg = |f: fn(&LabelMetrics) -> f64| {
        per_label.values().map(f).sum::<f64>() / per_label.len() as f64
    };
    Ok(MetricsReport {
        n_cases: n,
        subset_accuracy: ratio(exact, n),
        macro_precision: macro_avg(|l| l.precision),
        macro_recall: macro_avg(|l| l.recall),
        macro_f1: macro_avg(|l| l.f1),
        hamming_loss: ratio(wrong, n * m.labels.len()),
        per_label,
        latency: LatencySummary::default(),
    })
}

/// Nearest-rank percentile of sorted values: the value at rank ceil(p·n).
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-case wall-clock time: backend latency of every attempt plus local
/// time. Calls without a case id are pooled under one anonymous case.
pub fn time_stats(records: &[LogRecord]) -> LatencySummary {
    let mut per_case: BTreeMap<&str, u64> = BTreeMap::new();
    let mut n_calls = 0;
    for r in records {
        match r {
            LogRecord::Call {
                case_id, latency_ms, ..
            } => {
                n_calls += 1;
                *per_case.entry(case_id.as_deref().unwrap_or("")).or_default() += latency_ms;
            }
            LogRecord::Case { case_id, local_ms } => {
                *per_case.entry(case_id.as_str()).or_default() += local_ms;
            }
        }
    }
    if per_case.is_empty() {
        return LatencySummary::default();
    }
    let mut totals: Vec<u64> = per_case.into_values().collect();
    totals.sort_unstable();
    LatencySummary {
        mean_ms: totals.iter().sum::<u64>() as f64 / totals.len() as f64,
        p50_ms: nearest_rank(&totals, 0.50),
        p95_ms: nearest_rank(&totals, 0.95),
        n_calls,
        n_cases: totals.len(),
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// Aligned plain-text rendering: headline metrics, per-label rows, latency.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "cases", "accuracy", "precision", "recall", "f1", "hamming"
        );
        let _ = writeln!(
            out,
            "{:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            self.n_cases,
            self.subset_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.hamming_loss
        );
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<16} {:>9} {:>9} {:>9} {:>8}",
            "label", "precision", "recall", "f1", "support"
        );
        for (label, m) in &self.per_label {
            let _ = writeln!(
                out,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                label.as_str(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        out.push('\n');
        let l = &self.latency;
        let _ = writeln!(
            out,
            "latency: mean {:.1} ms, p50 {} ms, p95 {} ms over {} case(s), {} call(s)",
            l.mean_ms, l.p50_ms, l.p95_ms, l.n_cases, l.n_calls
        );
        out
    }
}
