//! Overlap scores between predicted and reference binary masks.
//!
//! Degenerate masks: two empty masks agree perfectly (every score 1).
//! Otherwise a ratio with an empty denominator is 0, so an empty
//! prediction against a non-empty reference has precision 0 and a
//! non-empty prediction against an empty reference has recall 0.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// True-positive / false-positive / false-negative pixel tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::invalid(
                "metrics",
                format!("prediction {:?} and reference {:?} differ in size", pred.dims(), gt.dims()),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn zsi(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall.
    pub fn fscore(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Zijdenbos similarity index `2|P ∩ G| / (|P| + |G|)`.
pub fn zsi(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::tally(pred, gt)?.zsi())
}

pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::tally(pred, gt)?.precision())
}

pub fn recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::tally(pred, gt)?.recall())
}

pub fn fscore(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::tally(pred, gt)?.fscore())
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub zsi: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

impl MetricsRow {
    pub fn score(id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let c = Confusion::tally(pred, gt)?;
        Ok(MetricsRow {
            id: id.into(),
            zsi: c.zsi(),
            precision: c.precision(),
            recall: c.recall(),
            fscore: c.fscore(),
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.zsi, self.precision, self.recall, self.fscore]
    }
}

/// Mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// `mean±std` with three decimals, e.g. `0.933±0.140`.
    pub fn format(&self) -> String {
        format!("{:.3}±{:.3}", self.mean, self.std)
    }
}

pub const METRIC_NAMES: [&str; 4] = ["ZSI", "Precision", "Recall", "F-score"];

/// Per-image rows plus aggregate statistics in [`METRIC_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub summary: [Summary; 4],
}

/// Aggregate rows into per-metric mean and population std (divide by n).
pub fn aggregate(rows: Vec<MetricsRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::invalid("aggregate", "no rows to aggregate"));
    }
    let n = rows.len() as f64;
    let mut summary = [Summary { mean: 0.0, std: 0.0 }; 4];
    for (m, s) in summary.iter_mut().enumerate() {
        let mean = rows.iter().map(|r| r.values()[m]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.values()[m] - mean).powi(2)).sum::<f64>() / n;
        *s = Summary { mean, std: var.sqrt() };
    }
    Ok(MetricsReport { rows, summary })
}

impl MetricsReport {
    pub fn zsi(&self) -> Summary {
        self.summary[0]
    }

    pub fn precision(&self) -> Summary {
        self.summary[1]
    }

    pub fn recall(&self) -> Summary {
        self.summary[2]
    }

    pub fn fscore(&self) -> Summary {
        self.summary[3]
    }

    /// Tab-separated per-image table followed by `mean` and `std` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tzsi\tprecision\trecall\tfscore\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.id, r.zsi, r.precision, r.recall, r.fscore
            );
        }
        let line = |label: &str, f: &dyn Fn(&Summary) -> f64| {
            let vals: Vec<String> = self.summary.iter().map(|s| format!("{:.6}", f(s))).collect();
            format!("{label}\t{}\n", vals.join("\t"))
        };
        out += &line("mean", &|s| s.mean);
        out += &line("std", &|s| s.std);
        out
    }

    /// One metric per line, `name  mean±std`.
    pub fn summary_block(&self) -> String {
        let mut out = String::new();
        for (name, s) in METRIC_NAMES.iter().zip(&self.summary) {
            let _ = writeln!(out, "{name:<10} {}", s.format());
        }
        out
    }
}

/// Side-by-side comparison: one column per method, one row per metric
/// (ZSI / Precision / Recall / F-score), three-decimal means.
pub fn comparison_table(columns: &[(&str, &MetricsReport)]) -> String {
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<10}", "Methods");
    for (name, _) in columns {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    for (m, metric) in METRIC_NAMES.iter().enumerate() {
        let _ = write!(out, "{metric:<10}");
        for (_, report) in columns {
            let _ = write!(out, " {:>width$.3}", report.summary[m].mean);
        }
        out.push('\n');
    }
    out
}
