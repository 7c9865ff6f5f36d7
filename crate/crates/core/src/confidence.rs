//! Per-sample confidence scores: distance from a query embedding to its
//! nearest training embedding.
//!
//! The primary score is the Mahalanobis distance under the regularized
//! training covariance `Σ_reg = cov(Z_train) + ε·I`. With `Σ_reg = L Lᵀ`, every
//! point is whitened once as `w = L⁻¹(z − μ)`; Mahalanobis distances are then
//! plain Euclidean distances between whitened points, so nearest-neighbour
//! search is a brute-force scan over the whitened training matrix with early
//! abandoning of partial sums.
//!
//! Euclidean and cosine variants work on the raw embeddings. The Choquet
//! variant aggregates the per-dimension whitened contributions of the
//! Mahalanobis-nearest neighbour with OWA weights (a Choquet integral w.r.t. a
//! symmetric fuzzy measure); uniform weights reproduce the Mahalanobis score.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{cholesky, covariance, solve_lower_in_place, Matrix};
use crate::report::{csv_error, fmt_f64};

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-6;

/// Training rows scanned per block in the nearest-neighbour search.
const SCAN_BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mahalanobis,
    Euclidean,
    Cosine,
    FeatureMahalanobis,
    Choquet,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Mahalanobis,
        MetricKind::Euclidean,
        MetricKind::Cosine,
        MetricKind::FeatureMahalanobis,
        MetricKind::Choquet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Mahalanobis => "mahalanobis",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Cosine => "cosine",
            MetricKind::FeatureMahalanobis => "feature_mahalanobis",
            MetricKind::Choquet => "choquet",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric kind {s:?}")))
    }
}

/// Which geometry ranks training points when picking the nearest neighbour
/// for the Mahalanobis score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborRanking {
    #[default]
    Mahalanobis,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub value: f64,
    pub nn_index: usize,
    pub metric_kind: MetricKind,
}

/// Whitened training embeddings plus the covariance factorization.
#[derive(Debug, Clone)]
pub struct LatentIndex {
    kind: MetricKind,
    train: Matrix,
    mean: Vec<f64>,
    cov_reg: Matrix,
    chol: Matrix,
    whitened: Matrix,
    epsilon_scale: f64,
    epsilon: f64,
}

/// Builds a Mahalanobis index over latent embeddings.
pub fn build_index(z_train: &Matrix, epsilon_scale: f64) -> Result<LatentIndex> {
    LatentIndex::build(z_train, epsilon_scale, MetricKind::Mahalanobis)
}

impl LatentIndex {
    /// `Σ_reg = cov(Z) + ε·I` with `ε = epsilon_scale · trace(cov)/d`. When the
    /// covariance is identically zero, `ε = epsilon_scale`.
    pub fn build(train: &Matrix, epsilon_scale: f64, kind: MetricKind) -> Result<Self> {
        if !(epsilon_scale >= 0.0) || !epsilon_scale.is_finite() {
            return Err(Error::Config(format!(
                "epsilon_scale must be finite and >= 0, got {epsilon_scale}"
            )));
        }
        if train.cols() == 0 {
            return Err(Error::Empty("index over zero-dimensional points"));
        }
        train.check_finite("index training points")?;
        let cov = covariance(train)?;
        let d = cov.rows();
        let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
        let epsilon = if trace > 0.0 {
            epsilon_scale * trace / d as f64
        } else {
            epsilon_scale
        };
        let mut cov_reg = cov;
        for i in 0..d {
            cov_reg[(i, i)] += epsilon;
        }
        let chol = cholesky(&cov_reg)?;
        let mean = train.col_means();
        let whitened = whiten_rows(&chol, &mean, train)?;
        Ok(LatentIndex {
            kind,
            train: train.clone(),
            mean,
            cov_reg,
            chol,
            whitened,
            epsilon_scale,
            epsilon,
        })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn len(&self) -> usize {
        self.train.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.train.rows() == 0
    }

    pub fn train(&self) -> &Matrix {
        &self.train
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.cov_reg
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    pub fn whitened(&self) -> &Matrix {
        &self.whitened
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Dimension {
                context: "confidence query dimension",
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `L⁻¹(z − μ)`.
    pub fn whiten(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let mut w: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        solve_lower_in_place(&self.chol, &mut w)?;
        Ok(w)
    }

    /// Mahalanobis distance between two arbitrary points under `Σ_reg`.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_dim(a.len())?;
        self.check_dim(b.len())?;
        let mut diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        solve_lower_in_place(&self.chol, &mut diff)?;
        Ok(diff.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Distance to the Mahalanobis-nearest training point.
    pub fn mahalanobis_confidence(&self, z: &[f64]) -> Result<ConfidenceScore> {
        self.mahalanobis_confidence_ranked(z, NeighborRanking::Mahalanobis)
    }

    /// Mahalanobis distance to the nearest training point, where "nearest" is
    /// judged either in whitened space or by raw Euclidean distance.
    pub fn mahalanobis_confidence_ranked(
        &self,
        z: &[f64],
        ranking: NeighborRanking,
    ) -> Result<ConfidenceScore> {
        let w = self.whiten(z)?;
        let (nn_index, value) = match ranking {
            NeighborRanking::Mahalanobis => {
                let (idx, sq) = nearest_neighbor(&self.whitened, &w);
                (idx, sq.sqrt())
            }
            NeighborRanking::Euclidean => {
                let (idx, _) = nearest_neighbor(&self.train, z);
                let sq: f64 = w
                    .iter()
                    .zip(self.whitened.row(idx))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (idx, sq.sqrt())
            }
        };
        Ok(ConfidenceScore {
            value,
            nn_index,
            metric_kind: self.kind,
        })
    }

    /// Choquet integral of the squared whitened per-dimension differences to
    /// the Mahalanobis-nearest neighbour, w.r.t. the symmetric measure defined
    /// by `owa_weights`: `√(d · Σᵢ wᵢ c₍ᵢ₎)` with `c` sorted descending.
    pub fn choquet_confidence(&self, z: &[f64], owa_weights: &[f64]) -> Result<ConfidenceScore> {
        validate_owa_weights(owa_weights, self.dim())?;
        let w = self.whiten(z)?;
        let (nn_index, _) = nearest_neighbor(&self.whitened, &w);
        let mut contributions: Vec<f64> = w
            .iter()
            .zip(self.whitened.row(nn_index))
            .map(|(a, b)| (a - b) * (a - b))
            .collect();
        Ok(ConfidenceScore {
            value: owa_aggregate(&mut contributions, owa_weights).sqrt(),
            nn_index,
            metric_kind: MetricKind::Choquet,
        })
    }

    /// Scores every row of `queries`; rows are processed in parallel on the
    /// current rayon pool, results are in row order.
    pub fn score_batch(
        &self,
        queries: &Matrix,
        ranking: NeighborRanking,
    ) -> Result<Vec<ConfidenceScore>> {
        self.check_dim(queries.cols())?;
        (0..queries.rows())
            .into_par_iter()
            .map(|i| self.mahalanobis_confidence_ranked(queries.row(i), ranking))
            .collect()
    }

    pub fn choquet_batch(
        &self,
        queries: &Matrix,
        owa_weights: &[f64],
    ) -> Result<Vec<ConfidenceScore>> {
        self.check_dim(queries.cols())?;
        validate_owa_weights(owa_weights, self.dim())?;
        (0..queries.rows())
            .into_par_iter()
            .map(|i| self.choquet_confidence(queries.row(i), owa_weights))
            .collect()
    }

    pub fn to_artifact(&self, include_embeddings: bool) -> IndexArtifact {
        IndexArtifact {
            format_version: INDEX_FORMAT_VERSION,
            kind: self.kind,
            epsilon_scale: self.epsilon_scale,
            epsilon: self.epsilon,
            mean: self.mean.clone(),
            covariance: self.cov_reg.clone(),
            cholesky: self.chol.clone(),
            embeddings: include_embeddings.then(|| self.train.clone()),
        }
    }

    /// Restores an index. Embeddings come from the artifact or, when it was
    /// saved without them, from `embeddings` (re-derived by the caller).
    pub fn from_artifact(artifact: IndexArtifact, embeddings: Option<Matrix>) -> Result<Self> {
        if artifact.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "index format version {} (expected {INDEX_FORMAT_VERSION})",
                artifact.format_version
            )));
        }
        let train = artifact.embeddings.or(embeddings).ok_or_else(|| {
            Error::Compatibility("index artifact has no embeddings and none were supplied".into())
        })?;
        let d = artifact.mean.len();
        if train.cols() != d
            || artifact.cholesky.shape() != (d, d)
            || artifact.covariance.shape() != (d, d)
        {
            return Err(Error::Compatibility(format!(
                "index artifact dimension {d} does not match embeddings of width {}",
                train.cols()
            )));
        }
        let whitened = whiten_rows(&artifact.cholesky, &artifact.mean, &train)?;
        Ok(LatentIndex {
            kind: artifact.kind,
            train,
            mean: artifact.mean,
            cov_reg: artifact.covariance,
            chol: artifact.cholesky,
            whitened,
            epsilon_scale: artifact.epsilon_scale,
            epsilon: artifact.epsilon,
        })
    }
}

/// Serialized form of a [`LatentIndex`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexArtifact {
    pub format_version: u32,
    pub kind: MetricKind,
    pub epsilon_scale: f64,
    pub epsilon: f64,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub cholesky: Matrix,
    pub embeddings: Option<Matrix>,
}

fn whiten_rows(chol: &Matrix, mean: &[f64], points: &Matrix) -> Result<Matrix> {
    let d = mean.len();
    let mut out = points.clone();
    out.as_mut_slice().par_chunks_mut(d).try_for_each(|row| {
        row.iter_mut().zip(mean).for_each(|(v, m)| *v -= m);
        solve_lower_in_place(chol, row)
    })?;
    Ok(out)
}

/// Exact nearest neighbour of `query` among the rows of `points` by squared
/// Euclidean distance. Returns `(index, squared distance)`; ties keep the
/// lowest index. Partial sums are abandoned once they reach the best so far.
pub fn nearest_neighbor(points: &Matrix, query: &[f64]) -> (usize, f64) {
    let d = points.cols();
    debug_assert_eq!(d, query.len());
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    let data = points.as_slice();
    for block_start in (0..points.rows()).step_by(SCAN_BLOCK) {
        let block_end = (block_start + SCAN_BLOCK).min(points.rows());
        for (offset, row) in data[block_start * d..block_end * d]
            .chunks_exact(d)
            .enumerate()
        {
            let mut acc = 0.0;
            let mut abandoned = false;
            for (a, b) in row.iter().zip(query) {
                let diff = a - b;
                acc += diff * diff;
                if acc >= best {
                    abandoned = true;
                    break;
                }
            }
            if !abandoned {
                best = acc;
                best_idx = block_start + offset;
            }
        }
    }
    (best_idx, best)
}

/// Smallest Euclidean distance from `z` to a row of `train`.
pub fn euclidean_confidence(train: &Matrix, z: &[f64]) -> Result<ConfidenceScore> {
    if z.len() != train.cols() {
        return Err(Error::Dimension {
            context: "euclidean query dimension",
            expected: train.cols(),
            actual: z.len(),
        });
    }
    if train.rows() == 0 {
        return Err(Error::Empty("euclidean_confidence needs training rows"));
    }
    let (nn_index, sq) = nearest_neighbor(train, z);
    Ok(ConfidenceScore {
        value: sq.sqrt(),
        nn_index,
        metric_kind: MetricKind::Euclidean,
    })
}

pub fn euclidean_batch(train: &Matrix, queries: &Matrix) -> Result<Vec<ConfidenceScore>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|i| euclidean_confidence(train, queries.row(i)))
        .collect()
}

/// Training rows with precomputed norms for cosine scoring.
#[derive(Debug, Clone)]
pub struct CosineIndex<'a> {
    train: &'a Matrix,
    norms: Vec<f64>,
}

impl<'a> CosineIndex<'a> {
    pub fn new(train: &'a Matrix) -> Result<Self> {
        if train.rows() == 0 {
            return Err(Error::Empty("cosine index needs training rows"));
        }
        let norms: Vec<f64> = train.iter_rows().map(l2_norm).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Numeric(format!(
                "cosine distance undefined: training row {i} has zero norm"
            )));
        }
        Ok(CosineIndex { train, norms })
    }

    /// `min_i (1 − cos(z, z_i))`, ties to the lowest index.
    pub fn score(&self, z: &[f64]) -> Result<ConfidenceScore> {
        if z.len() != self.train.cols() {
            return Err(Error::Dimension {
                context: "cosine query dimension",
                expected: self.train.cols(),
                actual: z.len(),
            });
        }
        let qn = l2_norm(z);
        if qn == 0.0 {
            return Err(Error::Numeric(
                "cosine distance undefined: zero-norm query".into(),
            ));
        }
        let mut best = f64::INFINITY;
        let mut best_idx = 0;
        for (i, (row, &n)) in self.train.iter_rows().zip(&self.norms).enumerate() {
            let dot: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            let dist = (1.0 - dot / (n * qn)).max(0.0);
            if dist < best {
                best = dist;
                best_idx = i;
            }
        }
        Ok(ConfidenceScore {
            value: best,
            nn_index: best_idx,
            metric_kind: MetricKind::Cosine,
        })
    }

    pub fn score_batch(&self, queries: &Matrix) -> Result<Vec<ConfidenceScore>> {
        (0..queries.rows())
            .into_par_iter()
            .map(|i| self.score(queries.row(i)))
            .collect()
    }
}

pub fn cosine_confidence(train: &Matrix, z: &[f64]) -> Result<ConfidenceScore> {
    CosineIndex::new(train)?.score(z)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mahalanobis confidence computed over encoded feature vectors instead of
/// latent embeddings.
pub fn feature_space_confidence(
    x_train: &Matrix,
    x_query: &[f64],
    epsilon_scale: f64,
) -> Result<ConfidenceScore> {
    LatentIndex::build(x_train, epsilon_scale, MetricKind::FeatureMahalanobis)?
        .mahalanobis_confidence(x_query)
}

pub fn uniform_owa_weights(d: usize) -> Vec<f64> {
    vec![1.0 / d as f64; d]
}

pub fn validate_owa_weights(weights: &[f64], d: usize) -> Result<()> {
    if weights.len() != d {
        return Err(Error::Config(format!(
            "OWA weights: expected {d} values, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config(
            "OWA weights must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "OWA weights must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// `d · Σᵢ wᵢ c₍ᵢ₎` with contributions sorted in descending order (in place).
fn owa_aggregate(contributions: &mut [f64], weights: &[f64]) -> f64 {
    contributions.sort_by(|a, b| b.total_cmp(a));
    let d = contributions.len() as f64;
    // uniform weights reduce to Σ c up to rounding
    d * contributions
        .iter()
        .zip(weights)
        .map(|(c, w)| w * c)
        .sum::<f64>()
}

/// CSV columns: sample_index, metric_kind, value, nn_index.
pub fn write_scores_csv<W: Write>(out: W, scores: &[ConfidenceScore]) -> Result<()> {
    write_score_groups_csv(out, [scores])
}

/// Long format: one block per metric, `sample_index` restarting at 0 in each.
pub fn write_score_groups_csv<'a, W, I>(out: W, groups: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a [ConfidenceScore]>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_index", "metric_kind", "value", "nn_index"])
        .map_err(csv_error)?;
    for scores in groups {
        for (i, s) in scores.iter().enumerate() {
            w.write_record([
                i.to_string(),
                s.metric_kind.to_string(),
                fmt_f64(s.value),
                s.nn_index.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
