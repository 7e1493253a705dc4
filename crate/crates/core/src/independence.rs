//! Pearson's chi-squared test of independence for two-way contingency
//! tables.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest degrees of freedom accepted by [`chi_square_sf`].
pub const MAX_DOF: usize = 30;

/// Absolute tolerance of [`critical_value`] in `x`.
pub const CRITICAL_VALUE_TOLERANCE: f64 = 1e-9;

pub const NULL_HYPOTHESIS: &str = "no significant relationship between the two variables";

#[derive(Debug, Error)]
pub enum IndependenceError {
    #[error("contingency table must be at least 2x2, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("{labels} labels: expected {expected}, got {found}")]
    LabelCount {
        labels: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{axis} {index} has a zero marginal total; the test is undefined")]
    ZeroMarginal { axis: &'static str, index: usize },
    #[error("expected count at ({row}, {col}) is {value}, must be positive")]
    NonPositiveExpected { row: usize, col: usize, value: f64 },
    #[error("shape mismatch between observed and expected counts")]
    ShapeMismatch,
    #[error("chi-squared statistic must be non-negative and finite, got {0}")]
    InvalidStatistic(f64),
    #[error("degrees of freedom {0} outside 1..={MAX_DOF}")]
    DofOutOfRange(usize),
    #[error("alpha {0} must lie strictly between 0 and 1")]
    InvalidAlpha(f64),
    #[error("incomplete gamma evaluation did not converge for a={a}, x={x}")]
    NoConvergence { a: f64, x: f64 },
    #[error(
        "decision rules disagree: p={p_value} vs alpha={alpha}, statistic={statistic} vs critical={critical_value}"
    )]
    InconsistentDecision {
        p_value: f64,
        alpha: f64,
        statistic: f64,
        critical_value: f64,
    },
    #[error("contingency CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for IndependenceError {
    fn from(e: csv::Error) -> Self {
        IndependenceError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    observed: Vec<Vec<u64>>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
}

impl ContingencyTable {
    pub fn new(
        observed: Vec<Vec<u64>>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
    ) -> Result<Self, IndependenceError> {
        let rows = observed.len();
        let cols = observed.first().map_or(0, Vec::len);
        if rows < 2 || cols < 2 {
            return Err(IndependenceError::TooSmall { rows, cols });
        }
        if let Some((row, r)) = observed.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(IndependenceError::Ragged {
                row,
                found: r.len(),
                expected: cols,
            });
        }
        for (labels, expected, found) in [("row", rows, row_labels.len()), ("column", cols, col_labels.len())] {
            if expected != found {
                return Err(IndependenceError::LabelCount { labels, expected, found });
            }
        }
        Ok(Self {
            observed,
            row_labels,
            col_labels,
        })
    }

    /// Table with numeric labels `0..r` and `0..c`.
    pub fn from_counts(observed: Vec<Vec<u64>>) -> Result<Self, IndependenceError> {
        let rows = (0..observed.len()).map(|i| i.to_string()).collect();
        let cols = (0..observed.first().map_or(0, Vec::len)).map(|i| i.to_string()).collect();
        Self::new(observed, rows, cols)
    }

    pub fn observed(&self) -> &[Vec<u64>] {
        &self.observed
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn rows(&self) -> usize {
        self.observed.len()
    }

    pub fn cols(&self) -> usize {
        self.observed[0].len()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.observed.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.cols()).map(|j| self.observed.iter().map(|r| r[j]).sum()).collect()
    }

    pub fn grand_total(&self) -> u64 {
        self.row_totals().iter().sum()
    }

    pub fn dof(&self) -> usize {
        (self.rows() - 1) * (self.cols() - 1)
    }

    /// CSV with a header of column labels, one row per row label, and a
    /// trailing `total` row and column.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), IndependenceError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![String::new()];
        header.extend(self.col_labels.iter().cloned());
        header.push("total".into());
        w.write_record(&header)?;
        for (label, (row, total)) in self.row_labels.iter().zip(self.observed.iter().zip(self.row_totals())) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(u64::to_string));
            rec.push(total.to_string());
            w.write_record(&rec)?;
        }
        let mut rec = vec!["total".to_string()];
        rec.extend(self.col_totals().iter().map(u64::to_string));
        rec.push(self.grand_total().to_string());
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), IndependenceError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parses the layout written by [`ContingencyTable::write_csv`]. The
    /// `total` row and column are optional and, when present, must match
    /// the cell sums.
    pub fn read_csv(reader: impl Read) -> Result<Self, IndependenceError> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut records = r.records();
        let header = records
            .next()
            .ok_or_else(|| IndependenceError::Csv("missing header row".into()))??;
        let mut col_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let has_total_col = col_labels.last().is_some_and(|l| l.eq_ignore_ascii_case("total"));
        if has_total_col {
            col_labels.pop();
        }
        let mut row_labels = Vec::new();
        let mut observed = Vec::new();
        let mut row_totals = Vec::new();
        let mut total_row: Option<Vec<u64>> = None;
        for (line, rec) in records.enumerate() {
            let rec = rec?;
            let line = line + 2;
            if total_row.is_some() {
                return Err(IndependenceError::Csv(format!("line {line}: data after the total row")));
            }
            let label = rec.get(0).unwrap_or_default().to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<u64>().map_err(|_| {
                        IndependenceError::Csv(format!("line {line}: {v:?} is not a non-negative integer"))
                    })
                })
                .collect::<Result<Vec<u64>, _>>()?;
            let width = col_labels.len() + usize::from(has_total_col);
            if values.len() != width {
                return Err(IndependenceError::Csv(format!(
                    "line {line}: expected {width} values, got {}",
                    values.len()
                )));
            }
            if label.eq_ignore_ascii_case("total") {
                total_row = Some(values);
                continue;
            }
            let (cells, total) = if has_total_col {
                (values[..values.len() - 1].to_vec(), values.last().copied())
            } else {
                (values, None)
            };
            row_labels.push(label);
            row_totals.push(total);
            observed.push(cells);
        }
        let table = Self::new(observed, row_labels, col_labels)?;
        for (i, (given, actual)) in row_totals.iter().zip(table.row_totals()).enumerate() {
            if given.is_some_and(|g| g != actual) {
                return Err(IndependenceError::Csv(format!(
                    "row {:?} total {} does not match cell sum {actual}",
                    table.row_labels[i],
                    given.unwrap()
                )));
            }
        }
        if let Some(totals) = total_row {
            let mut actual = table.col_totals();
            if has_total_col {
                actual.push(table.grand_total());
            }
            if totals != actual {
                return Err(IndependenceError::Csv(format!(
                    "total row {totals:?} does not match column sums {actual:?}"
                )));
            }
        }
        Ok(table)
    }

    pub fn load_csv(path: &Path) -> Result<Self, IndependenceError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Cell counts expected under independence: row total times column total
/// over the grand total.
pub fn expected_counts(t: &ContingencyTable) -> Result<Vec<Vec<f64>>, IndependenceError> {
    let rows = t.row_totals();
    let cols = t.col_totals();
    for (axis, totals) in [("row", &rows), ("column", &cols)] {
        if let Some(index) = totals.iter().position(|&v| v == 0) {
            return Err(IndependenceError::ZeroMarginal { axis, index });
        }
    }
    let grand = t.grand_total() as f64;
    Ok(rows
        .iter()
        .map(|&r| cols.iter().map(|&c| r as f64 * c as f64 / grand).collect())
        .collect())
}

/// Pearson statistic: sum over cells of `(O - E)^2 / E`.
pub fn chi_square_statistic(observed: &[Vec<u64>], expected: &[Vec<f64>]) -> Result<f64, IndependenceError> {
    if observed.len() != expected.len() || observed.iter().zip(expected).any(|(o, e)| o.len() != e.len()) {
        return Err(IndependenceError::ShapeMismatch);
    }
    let mut sum = 0.0;
    for (i, (orow, erow)) in observed.iter().zip(expected).enumerate() {
        for (j, (&o, &e)) in orow.iter().zip(erow).enumerate() {
            if !(e > 0.0) {
                return Err(IndependenceError::NonPositiveExpected { row: i, col: j, value: e });
            }
            let d = o as f64 - e;
            sum += d * d / e;
        }
    }
    Ok(sum)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularised upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> Result<f64, IndependenceError> {
    if x <= 0.0 {
        return Ok(1.0);
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut term = 1.0 / a;
        let mut sum = term;
        for n in 1..GAMMA_MAX_ITER {
            term *= x / (a + n as f64);
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                return Ok(1.0 - sum * log_prefix.exp());
            }
        }
        Err(IndependenceError::NoConvergence { a, x })
    } else {
        // Modified Lentz continued fraction for Q(a, x).
        let tiny = f64::MIN_POSITIVE / GAMMA_EPS;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                return Ok(log_prefix.exp() * h);
            }
        }
        Err(IndependenceError::NoConvergence { a, x })
    }
}

/// Upper-tail probability of the chi-squared distribution with `dof`
/// degrees of freedom.
pub fn chi_square_sf(x: f64, dof: usize) -> Result<f64, IndependenceError> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(IndependenceError::InvalidStatistic(x));
    }
    if dof == 0 || dof > MAX_DOF {
        return Err(IndependenceError::DofOutOfRange(dof));
    }
    Ok(gamma_q(dof as f64 / 2.0, x / 2.0)?.clamp(0.0, 1.0))
}

/// The `x` with `sf(x, dof) = alpha`, by bracketing and bisection.
pub fn critical_value(alpha: f64, dof: usize) -> Result<f64, IndependenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(IndependenceError::InvalidAlpha(alpha));
    }
    let (mut lo, mut hi) = (0.0, dof as f64 + 1.0);
    while chi_square_sf(hi, dof)? > alpha {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > CRITICAL_VALUE_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if chi_square_sf(mid, dof)? > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub critical_value: f64,
    pub reject_null: bool,
    pub null_hypothesis: String,
    pub observed: Vec<Vec<u64>>,
    pub expected: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl ChiSquareResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialises")
    }
}

/// Runs the test and checks that the p-value rule and the critical-value
/// rule reach the same decision.
pub fn test_independence(t: &ContingencyTable, alpha: f64) -> Result<ChiSquareResult, IndependenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(IndependenceError::InvalidAlpha(alpha));
    }
    let expected = expected_counts(t)?;
    let statistic = chi_square_statistic(t.observed(), &expected)?;
    let dof = t.dof();
    let p_value = chi_square_sf(statistic, dof)?;
    let critical_value = critical_value(alpha, dof)?;
    let by_p = p_value < alpha;
    let by_critical = statistic > critical_value;
    if by_p != by_critical {
        return Err(IndependenceError::InconsistentDecision {
            p_value,
            alpha,
            statistic,
            critical_value,
        });
    }
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value,
        alpha,
        critical_value,
        reject_null: by_p,
        null_hypothesis: NULL_HYPOTHESIS.to_string(),
        observed: t.observed().to_vec(),
        expected,
        row_labels: t.row_labels().to_vec(),
        col_labels: t.col_labels().to_vec(),
    })
}
