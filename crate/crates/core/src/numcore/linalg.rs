use crate::error::{Error, Result};

use super::Matrix;

/// Unbiased sample covariance `(Z − mean)ᵀ(Z − mean) / (n − 1)`.
pub fn covariance(z: &Matrix) -> Result<Matrix> {
    if z.rows() < 2 {
        return Err(Error::Dimension {
            context: "covariance needs at least 2 rows",
            expected: 2,
            actual: z.rows(),
        });
    }
    let mean = z.col_means();
    let mut centered = z.clone();
    for i in 0..centered.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    let denom = (z.rows() - 1) as f64;
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= denom);
    // exact symmetry; the product can differ in the last bit across triangles
    let d = cov.rows();
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    Ok(cov)
}

/// Lower-triangular `L` with `L Lᵀ = a`. Only the lower triangle of `a` is read.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    a.expect_cols("cholesky (square)", n)?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Forward substitution: solves `L x = v` in place.
pub fn solve_lower_in_place(l: &Matrix, v: &mut [f64]) -> Result<()> {
    let n = l.rows();
    if v.len() != n {
        return Err(Error::Dimension {
            context: "solve_lower right-hand side",
            expected: n,
            actual: v.len(),
        });
    }
    for i in 0..n {
        let row = l.row(i);
        let mut s = v[i];
        for k in 0..i {
            s -= row[k] * v[k];
        }
        v[i] = s / row[i];
    }
    Ok(())
}

/// `L⁻¹ v` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    solve_lower_in_place(l, &mut out)?;
    Ok(out)
}
