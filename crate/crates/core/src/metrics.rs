//! Confusion matrices and precision, recall, F1, and accuracy.
//!
//! Every ratio with a zero denominator is defined as 0.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold has {gold} entries but pred has {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("class {class} out of range for {k} classes")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("need at least one class")]
    NoClasses,
    #[error("confusion matrix must be square, found a row of {found} for {k} classes")]
    NotSquare { found: usize, k: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `counts[i][j]` is the number of items with gold class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tpos: u64,
    pub tneg: u64,
    pub fpos: u64,
    pub fneg: u64,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    /// Rejects non-square input.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = counts.len();
        if k == 0 {
            return Err(MetricsError::NoClasses);
        }
        if let Some(row) = counts.iter().find(|r| r.len() != k) {
            return Err(MetricsError::NotSquare { found: row.len(), k });
        }
        Ok(Self { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn class_counts(&self, class: usize) -> ConfusionCounts {
        let total = self.total();
        let tpos = self.counts[class][class];
        let fneg = self.counts[class].iter().sum::<u64>() - tpos;
        let fpos = self.counts.iter().map(|r| r[class]).sum::<u64>() - tpos;
        ConfusionCounts {
            tpos,
            tneg: total - tpos - fneg - fpos,
            fpos,
            fneg,
        }
    }

    /// Comma-separated matrix with a `gold\pred` corner cell and class names
    /// as headers.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("gold\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(gold: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if k == 0 {
        return Err(MetricsError::NoClasses);
    }
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut m = ConfusionMatrix::zeros(k);
    for (&g, &p) in gold.iter().zip(pred) {
        if let Some(&class) = [g, p].iter().find(|&&c| c >= k) {
            return Err(MetricsError::ClassOutOfRange { class, k });
        }
        m.counts[g][p] += 1;
    }
    Ok(m)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tpos, c.tpos + c.fpos)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tpos, c.tpos + c.fneg)
}

pub fn f1_from(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    f1_from(precision(c), recall(c))
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(m.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
}

/// How per-class values are combined into headline numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            other => Err(format!("unknown averaging {other:?} (expected macro or micro)")),
        }
    }
}

impl MetricsBundle {
    /// `(precision, recall, f1)` under the chosen averaging.
    pub fn headline(&self, averaging: Averaging) -> (f64, f64, f64) {
        match averaging {
            Averaging::Macro => (self.macro_precision, self.macro_recall, self.macro_f1),
            Averaging::Micro => (self.micro_precision, self.micro_recall, self.micro_f1),
        }
    }
}

pub fn bundle(m: &ConfusionMatrix) -> Result<MetricsBundle, MetricsError> {
    let accuracy = accuracy(m)?;
    let k = m.k() as f64;
    let counts: Vec<ConfusionCounts> = (0..m.k()).map(|c| m.class_counts(c)).collect();
    let per_class: Vec<ClassMetrics> = counts
        .iter()
        .map(|c| ClassMetrics {
            precision: precision(c),
            recall: recall(c),
            f1: f1(c),
            support: c.tpos + c.fneg,
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let pooled = counts.iter().fold(ConfusionCounts::default(), |acc, c| ConfusionCounts {
        tpos: acc.tpos + c.tpos,
        tneg: acc.tneg + c.tneg,
        fpos: acc.fpos + c.fpos,
        fneg: acc.fneg + c.fneg,
    });
    Ok(MetricsBundle {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        micro_precision: precision(&pooled),
        micro_recall: recall(&pooled),
        micro_f1: f1(&pooled),
        accuracy,
        per_class,
    })
}

/// Serialised evaluation result: the bundle plus the raw matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub class_names: Vec<String>,
    pub averaging: Averaging,
    pub zero_division: f64,
    pub items: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub metrics: MetricsBundle,
    pub confusion_matrix: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn new(
        task: &str,
        class_names: &[&str],
        m: &ConfusionMatrix,
        averaging: Averaging,
    ) -> Result<Self, MetricsError> {
        let metrics = bundle(m)?;
        let (precision, recall, f1) = metrics.headline(averaging);
        Ok(Self {
            task: task.to_string(),
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            averaging,
            zero_division: 0.0,
            items: m.total(),
            precision,
            recall,
            f1,
            accuracy: metrics.accuracy,
            metrics,
            confusion_matrix: m.counts().to_vec(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}
