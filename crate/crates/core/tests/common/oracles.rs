//! Randomized oracle suites for the confidence scores and threshold search.
//! Each returns the worst discrepancy it saw.

use ids_confidence::confidence::{
    euclidean_confidence, uniform_owa_weights, IndexArtifact, LatentIndex, MetricKind,
    NeighborRanking, INDEX_FORMAT_VERSION,
};
use ids_confidence::detector::fit_threshold;
use ids_confidence::numcore::{Matrix, RngStream};

use super::{
    brute_force_mahalanobis, brute_force_threshold, invert, regularized_covariance,
    threshold_instance,
};

/// `n` correlated points: `g Aᵀ + m` with Gaussian `g`.
pub fn correlated_points(
    rng: &mut RngStream,
    n: usize,
    d: usize,
    mix: &Matrix,
    shift: &[f64],
) -> Matrix {
    affine(&rng.normal_matrix(n, d), mix, shift)
}

/// Rows mapped by `z ↦ A z + b`.
pub fn affine(m: &Matrix, a: &Matrix, b: &[f64]) -> Matrix {
    let mut out = m.matmul_t(a).unwrap();
    for i in 0..out.rows() {
        for (v, s) in out.row_mut(i).iter_mut().zip(b) {
            *v += s;
        }
    }
    out
}

pub fn random_mix(rng: &mut RngStream, d: usize, diag: f64) -> Matrix {
    let mut a = rng.normal_matrix(d, d);
    for i in 0..d {
        a[(i, i)] += diag;
    }
    a
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleOutcome {
    pub worst_rel: f64,
    pub index_mismatches: usize,
}

/// Whitened nearest-neighbour scores against explicit-inverse brute force on
/// 200 random 20-D training points.
pub fn mahalanobis_vs_explicit_inverse(seed: u64, queries: usize) -> OracleOutcome {
    let mut rng = RngStream::new(seed);
    let d = 20;
    let mix = random_mix(&mut rng, d, 2.0);
    let shift: Vec<f64> = (0..d).map(|_| rng.uniform(-3.0, 3.0)).collect();
    let train = correlated_points(&mut rng, 200, d, &mix, &shift);
    let scale = 1e-6;
    let index = LatentIndex::build(&train, scale, MetricKind::Mahalanobis).unwrap();
    let precision = invert(&regularized_covariance(&train, scale));
    let q = correlated_points(&mut rng, queries, d, &mix, &shift);
    let mut out = OracleOutcome::default();
    for i in 0..queries {
        let got = index.mahalanobis_confidence(q.row(i)).unwrap();
        let (idx, want) = brute_force_mahalanobis(&train, &precision, q.row(i));
        out.worst_rel = out
            .worst_rel
            .max((got.value - want).abs() / want.abs().max(1e-300));
        out.index_mismatches += usize::from(idx != got.nn_index);
    }
    out
}

/// Index restored with covariance I: Mahalanobis must equal Euclidean.
pub fn identity_covariance_vs_euclidean(seed: u64, queries: usize) -> f64 {
    let mut rng = RngStream::new(seed);
    let d = 20;
    let train = rng.normal_matrix(200, d);
    let artifact = IndexArtifact {
        format_version: INDEX_FORMAT_VERSION,
        kind: MetricKind::Mahalanobis,
        epsilon_scale: 0.0,
        epsilon: 0.0,
        mean: (0..d).map(|_| rng.normal()).collect(),
        covariance: Matrix::identity(d),
        cholesky: Matrix::identity(d),
        embeddings: Some(train.clone()),
    };
    let index = LatentIndex::from_artifact(artifact, None).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..queries {
        let q: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
        let m = index.mahalanobis_confidence(&q).unwrap();
        let e = euclidean_confidence(&train, &q).unwrap();
        worst = worst.max((m.value - e.value).abs() / e.value.max(1e-300));
        if m.nn_index != e.nn_index {
            worst = f64::INFINITY;
        }
    }
    worst
}

/// Confidence under `z ↦ A z + b` applied to training and query points alike,
/// with ε = 0 on well-conditioned data.
pub fn affine_equivariance(seed: u64, queries: usize) -> f64 {
    let mut rng = RngStream::new(seed);
    let d = 6;
    let mix = random_mix(&mut rng, d, 4.0);
    let train = correlated_points(&mut rng, 300, d, &mix, &vec![0.0; d]);
    let q = correlated_points(&mut rng, queries, d, &mix, &vec![0.0; d]);
    let a = random_mix(&mut rng, d, 3.0);
    let b: Vec<f64> = (0..d).map(|_| rng.uniform(-5.0, 5.0)).collect();
    let map = |m: &Matrix| affine(m, &a, &b);
    let base = LatentIndex::build(&train, 0.0, MetricKind::Mahalanobis).unwrap();
    let moved = LatentIndex::build(&map(&train), 0.0, MetricKind::Mahalanobis).unwrap();
    let q_moved = map(&q);
    let mut worst: f64 = 0.0;
    for i in 0..queries {
        let s0 = base.mahalanobis_confidence(q.row(i)).unwrap();
        let s1 = moved.mahalanobis_confidence(q_moved.row(i)).unwrap();
        worst = worst.max((s0.value - s1.value).abs() / s0.value.max(1e-300));
    }
    worst
}

/// Uniform-weight Choquet score against the Mahalanobis score.
pub fn choquet_uniform_vs_mahalanobis(seed: u64, queries: usize) -> f64 {
    let mut rng = RngStream::new(seed);
    let d = 20;
    let mix = random_mix(&mut rng, d, 2.0);
    let train = correlated_points(&mut rng, 500, d, &mix, &vec![1.0; d]);
    let index = LatentIndex::build(&train, 1e-6, MetricKind::Mahalanobis).unwrap();
    let w = uniform_owa_weights(d);
    let q = correlated_points(&mut rng, queries, d, &mix, &vec![1.0; d]);
    let mut worst: f64 = 0.0;
    for i in 0..queries {
        let m = index
            .mahalanobis_confidence_ranked(q.row(i), NeighborRanking::Mahalanobis)
            .unwrap();
        let c = index.choquet_confidence(q.row(i), &w).unwrap();
        worst = worst.max((m.value - c.value).abs() / m.value.max(1.0));
        if m.nn_index != c.nn_index {
            worst = f64::INFINITY;
        }
    }
    worst
}

/// Number of instances where the fast search disagrees with brute force.
pub fn threshold_mismatches(seed: u64, instances: usize, n: usize) -> usize {
    let mut rng = RngStream::new(seed);
    (0..instances)
        .filter(|_| {
            let (re, y) = threshold_instance(&mut rng, n);
            let fast = fit_threshold(&re, &y).unwrap();
            let (t, f1) = brute_force_threshold(&re, &y);
            fast.threshold != t || (fast.fit_metrics.f1 - f1).abs() > 1e-15
        })
        .count()
}
