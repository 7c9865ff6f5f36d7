//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod gradcheck;
pub mod oracles;

use std::fmt::Write as _;
use std::path::Path;

use ids_confidence::detector::ConfusionCounts;
use ids_confidence::numcore::{Matrix, RngStream};

/// Synthetic records in the 43-field NSL-KDD layout. Intrusions get larger
/// traffic counters and different symbolic values, so a small model can
/// separate them.
pub fn synthetic_lines(n: usize, seed: u64) -> String {
    let mut rng = RngStream::new(seed);
    let protocols = ["tcp", "udp", "icmp"];
    let services = ["http", "ftp_data", "smtp", "private", "domain_u"];
    let flags = ["SF", "S0", "REJ"];
    let mut out = String::new();
    for i in 0..n {
        let attack = i % 5 < 2;
        let pick = |r: f64, len: usize| ((r * len as f64) as usize).min(len - 1);
        let proto = protocols[pick(rng.uniform(0.0, 1.0), if attack { 3 } else { 2 })];
        let service = services[pick(rng.uniform(0.0, 1.0), services.len())];
        let flag = if attack {
            flags[1 + pick(rng.uniform(0.0, 1.0), 2)]
        } else {
            flags[0]
        };
        let mut fields: Vec<String> = Vec::with_capacity(43);
        fields.push(format!("{}", (rng.uniform(0.0, 5.0)) as u32));
        fields.push(proto.into());
        fields.push(service.into());
        fields.push(flag.into());
        for j in 0..37 {
            let base = if attack && j % 3 == 0 { 50.0 } else { 2.0 };
            let v = (base + rng.normal() * base * 0.2).abs();
            if j % 4 == 1 {
                fields.push(format!("{:.2}", (v / 60.0).min(1.0)));
            } else {
                fields.push(format!("{}", v.round() as u64));
            }
        }
        fields.push(if attack { "neptune" } else { "normal" }.into());
        fields.push(format!("{}", 15 + i % 7));
        writeln!(out, "{}", fields.join(",")).unwrap();
    }
    out
}

pub fn write_synthetic(path: &Path, n: usize, seed: u64) {
    std::fs::write(path, synthetic_lines(n, seed)).unwrap();
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` around `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    let data: Vec<f64> = m.into_iter().flat_map(|row| row[n..].to_vec()).collect();
    Matrix::from_vec(n, n, data).unwrap()
}

/// Sample covariance (n − 1) plus `ε·I`, `ε = scale·trace/d`.
pub fn regularized_covariance(z: &Matrix, scale: f64) -> Matrix {
    let (n, d) = z.shape();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| z[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (z[(i, a)] - mean[a]) * (z[(i, b)] - mean[b]);
            }
        }
    }
    let mut trace = 0.0;
    for a in 0..d {
        for b in 0..d {
            cov[(a, b)] /= (n - 1) as f64;
        }
        trace += cov[(a, a)];
    }
    let eps = if trace > 0.0 {
        scale * trace / d as f64
    } else {
        scale
    };
    for a in 0..d {
        cov[(a, a)] += eps;
    }
    cov
}

/// Brute-force `min_i √((q − z_i)ᵀ P (q − z_i))` with `P` an explicit inverse.
/// Returns `(index, distance)`, lowest index on ties.
pub fn brute_force_mahalanobis(train: &Matrix, precision: &Matrix, q: &[f64]) -> (usize, f64) {
    let d = q.len();
    let mut best = (0, f64::INFINITY);
    for (i, z) in train.iter_rows().enumerate() {
        let diff: Vec<f64> = q.iter().zip(z).map(|(a, b)| a - b).collect();
        let mut acc = 0.0;
        for a in 0..d {
            for b in 0..d {
                acc += diff[a] * precision[(a, b)] * diff[b];
            }
        }
        if acc < best.1 {
            best = (i, acc);
        }
    }
    (best.0, best.1.max(0.0).sqrt())
}

fn f1_of(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / den as f64
    }
}

/// O(n²) threshold search: every candidate is scored by a full pass.
/// Returns `(threshold, f1)`, the smallest threshold among F1 ties.
pub fn brute_force_threshold(re_norm: &[f64], y: &[u8]) -> (f64, f64) {
    let mut values = re_norm.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut cands = vec![0.0, 1.0];
    for w in values.windows(2) {
        cands.push((w[0] + w[1]) / 2.0);
    }
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::NAN, -1.0);
    for &t in &cands {
        let mut c = ConfusionCounts::default();
        for (&r, &label) in re_norm.iter().zip(y) {
            match (label, r > t) {
                (1, true) => c.tp += 1,
                (0, true) => c.fp += 1,
                (0, false) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        let f1 = f1_of(&c);
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    best
}

/// Random labelled errors in [0, 1] with deliberate ties and both classes.
pub fn threshold_instance(rng: &mut RngStream, n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut y: Vec<u8> = (0..n)
        .map(|_| u8::from(rng.uniform(0.0, 1.0) < 0.45))
        .collect();
    y[0] = 0;
    y[1] = 1;
    let re: Vec<f64> = y
        .iter()
        .map(|&label| {
            let centre = if label == 1 { 0.6 } else { 0.35 };
            let v = (centre + 0.2 * rng.normal()).clamp(0.0, 1.0);
            (v * 200.0).round() / 200.0
        })
        .collect();
    (re, y)
}
