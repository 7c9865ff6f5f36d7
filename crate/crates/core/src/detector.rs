//! Reconstruction-error anomaly detection: per-sample squared error, min-max
//! normalization, strict-threshold classification and F1-optimal threshold
//! fitting.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::report::{csv_error, fmt_f64};
use crate::vae::Vae;

const RECONSTRUCT_CHUNK: usize = 2048;

/// `‖x − decode(latent_embed(x))‖²` for each row of `x`.
pub fn reconstruction_errors(vae: &Vae, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != vae.input_dim() {
        return Err(Error::Dimension {
            context: "reconstruction_errors input width",
            expected: vae.input_dim(),
            actual: x.cols(),
        });
    }
    let starts: Vec<usize> = (0..x.rows()).step_by(RECONSTRUCT_CHUNK).collect();
    let chunks: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + RECONSTRUCT_CHUNK).min(x.rows())).collect();
            let block = x.select_rows(&idx);
            let x_hat = vae.reconstruct(&block)?;
            Ok(squared_row_errors(&block, &x_hat))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Row-wise squared L2 distance between equally shaped matrices.
pub fn squared_row_errors(x: &Matrix, x_hat: &Matrix) -> Vec<f64> {
    x.iter_rows()
        .zip(x_hat.iter_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect()
}

/// Min-max constants for reconstruction errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNormalizer {
    pub min: f64,
    pub max: f64,
}

impl ErrorNormalizer {
    pub fn fit(re: &[f64]) -> Result<Self> {
        if re.is_empty() {
            return Err(Error::Empty("cannot normalize an empty error vector"));
        }
        let min = re.iter().copied().fold(f64::INFINITY, f64::min);
        let max = re.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ErrorNormalizer { min, max })
    }

    /// `(v − min)/(max − min)`, or 0 when the fitted range is degenerate.
    /// Values outside the fitted range map outside `[0, 1]`.
    pub fn apply(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (v - self.min) / span
        } else {
            0.0
        }
    }

    pub fn apply_all(&self, re: &[f64]) -> Vec<f64> {
        re.iter().map(|&v| self.apply(v)).collect()
    }
}

/// Min-max normalization over the vector itself. Empty input gives empty output.
pub fn normalize_errors(re: &[f64]) -> Vec<f64> {
    match ErrorNormalizer::fit(re) {
        Ok(n) => n.apply_all(re),
        Err(_) => Vec::new(),
    }
}

/// 1 where `re_norm > threshold`, else 0.
pub fn classify(re_norm: &[f64], threshold: f64) -> Vec<u8> {
    re_norm.iter().map(|&v| u8::from(v > threshold)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cell {
    Tp,
    Fp,
    Tn,
    Fn,
}

impl Cell {
    pub fn of(y_true: u8, y_hat: u8) -> Cell {
        match (y_true, y_hat) {
            (1, 1) => Cell::Tp,
            (0, 1) => Cell::Fp,
            (0, 0) => Cell::Tn,
            _ => Cell::Fn,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Cell::Tp => "TP",
            Cell::Fp => "FP",
            Cell::Tn => "TN",
            Cell::Fn => "FN",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2tp / (2tp + fp + fn)`, 0 when nothing is positive in truth or prediction.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// Exact comparison of F1 values via cross-multiplication.
    fn cmp_f1(&self, other: &ConfusionCounts) -> Ordering {
        let num_a = 2 * self.tp as u128;
        let den_a = (2 * self.tp + self.fp + self.fn_) as u128;
        let num_b = 2 * other.tp as u128;
        let den_b = (2 * other.tp + other.fp + other.fn_) as u128;
        match (den_a, den_b) {
            (0, 0) => Ordering::Equal,
            (0, _) => 0u128.cmp(&num_b),
            (_, 0) => num_a.cmp(&0),
            _ => (num_a * den_b).cmp(&(num_b * den_a)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// False when tp + fp = 0 and precision was set to 0.
    pub precision_defined: bool,
    /// False when tp + fn = 0 and recall was set to 0.
    pub recall_defined: bool,
}

impl Metrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let n = counts.total();
        Metrics {
            counts,
            precision: ratio(counts.tp, counts.tp + counts.fp),
            recall: ratio(counts.tp, counts.tp + counts.fn_),
            f1: counts.f1(),
            accuracy: ratio(counts.tp + counts.tn, n),
            precision_defined: counts.tp + counts.fp > 0,
            recall_defined: counts.tp + counts.fn_ > 0,
        }
    }
}

pub fn confusion_counts(y_true: &[u8], y_hat: &[u8]) -> Result<ConfusionCounts> {
    if y_true.len() != y_hat.len() {
        return Err(Error::Dimension {
            context: "confusion labels",
            expected: y_true.len(),
            actual: y_hat.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&t, &h) in y_true.iter().zip(y_hat) {
        match Cell::of(t, h) {
            Cell::Tp => c.tp += 1,
            Cell::Fp => c.fp += 1,
            Cell::Tn => c.tn += 1,
            Cell::Fn => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn confusion_and_metrics(y_true: &[u8], y_hat: &[u8]) -> Result<Metrics> {
    Ok(Metrics::from_counts(confusion_counts(y_true, y_hat)?))
}

/// A fitted threshold and the metrics it achieves on the fitting set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    pub fit_metrics: Metrics,
}

/// Candidate thresholds: 0, 1 and midpoints of consecutive distinct sorted values.
pub fn threshold_candidates(re_norm: &[f64]) -> Vec<f64> {
    let mut sorted = re_norm.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cands: Vec<f64> = sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    cands.push(0.0);
    cands.push(1.0);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands
}

/// Picks the candidate threshold with the highest F1 on `(re_norm, y_true)`;
/// ties go to the smallest threshold. O(n log n).
pub fn fit_threshold(re_norm: &[f64], y_true: &[u8]) -> Result<ThresholdModel> {
    if re_norm.len() != y_true.len() {
        return Err(Error::Dimension {
            context: "fit_threshold labels",
            expected: re_norm.len(),
            actual: y_true.len(),
        });
    }
    let positives = y_true.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == y_true.len() {
        return Err(Error::Config(
            "fit_threshold needs both classes in y_true".into(),
        ));
    }
    if re_norm.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(
            "fit_threshold: NaN in normalized errors".into(),
        ));
    }

    let mut order: Vec<usize> = (0..re_norm.len()).collect();
    order.sort_by(|&a, &b| re_norm[a].total_cmp(&re_norm[b]));
    let n = order.len();
    let negatives = n - positives;

    // Walk candidates upward; `cursor` counts samples with value <= threshold.
    let mut cursor = 0;
    let (mut below_pos, mut below_neg) = (0usize, 0usize);
    let mut best: Option<(f64, ConfusionCounts)> = None;
    for t in threshold_candidates(re_norm) {
        while cursor < n && re_norm[order[cursor]] <= t {
            if y_true[order[cursor]] == 1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            cursor += 1;
        }
        let counts = ConfusionCounts {
            tp: positives - below_pos,
            fp: negatives - below_neg,
            tn: below_neg,
            fn_: below_pos,
        };
        let better = match &best {
            None => true,
            Some((_, b)) => counts.cmp_f1(b) == Ordering::Greater,
        };
        if better {
            best = Some((t, counts));
        }
    }
    let (threshold, counts) = best.expect("candidate set always holds 0 and 1");
    Ok(ThresholdModel {
        threshold,
        fit_metrics: Metrics::from_counts(counts),
    })
}

/// Per-sample detection output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub re: f64,
    pub re_norm: f64,
    pub y_hat: u8,
    pub y_true: Option<u8>,
    pub cell: Option<Cell>,
}

pub fn detect(
    re: &[f64],
    normalizer: &ErrorNormalizer,
    threshold: f64,
    y_true: Option<&[u8]>,
) -> Result<Vec<Detection>> {
    if let Some(y) = y_true {
        if y.len() != re.len() {
            return Err(Error::Dimension {
                context: "detect labels",
                expected: re.len(),
                actual: y.len(),
            });
        }
    }
    Ok(re
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let re_norm = normalizer.apply(r);
            let y_hat = u8::from(re_norm > threshold);
            let truth = y_true.map(|y| y[i]);
            Detection {
                re: r,
                re_norm,
                y_hat,
                y_true: truth,
                cell: truth.map(|t| Cell::of(t, y_hat)),
            }
        })
        .collect())
}

/// CSV columns: sample_index, re, re_norm, y_true, y_hat, cell.
pub fn write_detections_csv<W: Write>(out: W, detections: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_index", "re", "re_norm", "y_true", "y_hat", "cell"])
        .map_err(csv_error)?;
    for (i, d) in detections.iter().enumerate() {
        w.write_record([
            i.to_string(),
            fmt_f64(d.re),
            fmt_f64(d.re_norm),
            d.y_true.map(|y| y.to_string()).unwrap_or_default(),
            d.y_hat.to_string(),
            d.cell.map(|c| c.as_str().to_string()).unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
