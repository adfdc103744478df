//! Classification and agreement statistics: macro-F1, pairwise agreement,
//! Fleiss kappa, confusion matrices, and the explanation accounting report.

mod report;

pub use report::{build_eval_report, EvalReport, EvalReportRow, KindCounts};

use std::collections::BTreeMap;
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("label '{0}' outside the declared label set")]
    UnknownLabel(String),
    #[error("rating matrix is degenerate: {0}")]
    Degenerate(String),
    #[error("rating matrix is ragged or has fewer than two raters")]
    BadMatrix,
}

/// Unweighted mean of per-class F1 scores. Classes absent from both lists are
/// skipped; a class that appears in the golds but is never predicted (or
/// never correct) contributes an F1 of zero.
pub fn macro_f1<L: Eq + Hash + Ord + Clone>(
    predictions: &[L],
    golds: &[L],
    labels: &[L],
) -> Result<f64, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), golds.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for label in labels {
        let tp = predictions
            .iter()
            .zip(golds)
            .filter(|(p, g)| *p == label && *g == label)
            .count() as f64;
        let pred_pos = predictions.iter().filter(|p| *p == label).count() as f64;
        let actual_pos = golds.iter().filter(|g| *g == label).count() as f64;
        if pred_pos == 0.0 && actual_pos == 0.0 {
            continue;
        }
        counted += 1;
        if tp == 0.0 {
            continue;
        }
        let precision = tp / pred_pos;
        let recall = tp / actual_pos;
        sum += 2.0 * precision * recall / (precision + recall);
    }
    if counted == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(sum / counted as f64)
}

/// Percentage of positions where the two raters agree.
pub fn pairwise_agreement<L: Eq>(a: &[L], b: &[L]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(100.0 * matches as f64 / a.len() as f64)
}

/// Items-by-raters matrix of categorical labels.
#[derive(Debug, Clone)]
pub struct RatingMatrix<L> {
    rows: Vec<Vec<L>>,
}

impl<L: Eq + Hash + Ord + Clone> RatingMatrix<L> {
    /// Every item must carry the same number (>= 2) of ratings.
    pub fn new(rows: Vec<Vec<L>>) -> Result<Self, MetricsError> {
        let raters = rows.first().map_or(0, Vec::len);
        if raters < 2 || rows.iter().any(|r| r.len() != raters) {
            return Err(MetricsError::BadMatrix);
        }
        Ok(Self { rows })
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn raters(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Fleiss kappa over a complete items-by-raters matrix,
/// `kappa = (p_bar - p_bar_e) / (1 - p_bar_e)`. When every rating in the
/// matrix is the same single label the expected agreement is 1 and kappa is
/// defined as 1.
pub fn fleiss_kappa<L: Eq + Hash + Ord + Clone>(matrix: &RatingMatrix<L>) -> Result<f64, MetricsError> {
    let n_items = matrix.items();
    let n_raters = matrix.raters();
    if n_items == 0 {
        return Err(MetricsError::Empty);
    }

    let mut category_totals: BTreeMap<&L, f64> = BTreeMap::new();
    let mut p_bar_sum = 0.0;
    for row in &matrix.rows {
        let mut counts: BTreeMap<&L, usize> = BTreeMap::new();
        for label in row {
            *counts.entry(label).or_default() += 1;
        }
        let sum_sq: usize = counts.values().map(|c| c * c).sum();
        p_bar_sum += (sum_sq - n_raters) as f64 / (n_raters * (n_raters - 1)) as f64;
        for (label, c) in counts {
            *category_totals.entry(label).or_default() += c as f64;
        }
    }
    let p_bar = p_bar_sum / n_items as f64;
    let total = (n_items * n_raters) as f64;
    let p_e: f64 = category_totals
        .values()
        .map(|c| (c / total) * (c / total))
        .sum();

    if (1.0 - p_e).abs() < 1e-12 {
        if (1.0 - p_bar).abs() < 1e-12 {
            return Ok(1.0);
        }
        return Err(MetricsError::Degenerate(
            "expected agreement is 1 but observed agreement is not".into(),
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Counts matrix with rows indexed by rater `a`'s labels and columns by
/// rater `b`'s, in the order of `labels`.
pub fn confusion_matrix<L: Eq + Hash + Ord + Clone + std::fmt::Debug>(
    a: &[L],
    b: &[L],
    labels: &[L],
) -> Result<Vec<Vec<usize>>, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let index: BTreeMap<&L, usize> = labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let mut matrix = vec![vec![0usize; labels.len()]; labels.len()];
    for (x, y) in a.iter().zip(b) {
        let i = *index
            .get(x)
            .ok_or_else(|| MetricsError::UnknownLabel(format!("{x:?}")))?;
        let j = *index
            .get(y)
            .ok_or_else(|| MetricsError::UnknownLabel(format!("{y:?}")))?;
        matrix[i][j] += 1;
    }
    Ok(matrix)
}
