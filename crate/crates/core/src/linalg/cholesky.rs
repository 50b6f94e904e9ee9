use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Relative multipliers of `trace(M)/n` tried, in order, when factorizing.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-9, 1e-6, 1e-3];

/// Symmetry tolerance (relative to the largest entry) accepted by [`cholesky_spd`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Lower Cholesky factor of `M + jitter·I`.
///
/// Only the symmetric part of `M` is used. Fails if `M` is visibly
/// asymmetric or if a pivot is not strictly positive.
pub fn cholesky_spd(m: &Matrix, jitter: f64) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "cholesky",
            lhs: m.shape(),
            rhs: (m.cols(), m.rows()),
        });
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    factor(&m.symmetrized(), jitter)
}

fn factor(sym: &Matrix, jitter: f64) -> Result<Matrix> {
    let n = sym.rows();
    let a = sym.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Matrix::new(n, n, l)
}

/// Factorizes with the jitter ladder: `c · trace(M)/n` for each `c` in
/// [`JITTER_LADDER`]. Returns the factor and the jitter that succeeded.
pub fn cholesky_ladder(m: &Matrix) -> Result<(Matrix, f64)> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "cholesky",
            lhs: m.shape(),
            rhs: (m.cols(), m.rows()),
        });
    }
    let n = m.rows().max(1) as f64;
    let mut scale = m.trace() / n;
    if !(scale > 0.0) || !scale.is_finite() {
        scale = 1.0;
    }
    let sym = m.symmetrized();
    for c in JITTER_LADDER {
        let jitter = c * scale;
        if let Ok(l) = factor(&sym, jitter) {
            return Ok((l, jitter));
        }
    }
    Err(Error::NotPositiveDefinite)
}

/// Solves `L y = b` for lower-triangular `L`, column by column.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    if l.rows() != b.rows() {
        return Err(Error::Shape {
            op: "solve_lower",
            lhs: l.shape(),
            rhs: b.shape(),
        });
    }
    let n = l.rows();
    let mut y = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = y.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * y.get(k, c);
            }
            y.set(i, c, s / l.get(i, i));
        }
    }
    Ok(y)
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &Matrix, y: &Matrix) -> Result<Matrix> {
    if l.rows() != y.rows() {
        return Err(Error::Shape {
            op: "solve_lower_transposed",
            lhs: l.shape(),
            rhs: y.shape(),
        });
    }
    let n = l.rows();
    let mut x = y.clone();
    for c in 0..y.cols() {
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// `A⁻¹ B` given the lower Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_lower_transposed(l, &solve_lower(l, b)?)
}

/// Square-root factor `S` with `S Sᵀ = M` for a positive semi-definite `M`.
///
/// Zero pivots produce zero columns, so `M = 0` is accepted. Used for
/// sampling, never inside the filter.
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let sym = m.symmetrized();
    let tol = 1e-14 * m.max_abs().max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = sym.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d < -tol {
            return Err(Error::NotPositiveDefinite);
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = sym.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Natural log of the determinant from a Cholesky factor.
pub fn log_det_from_factor(l: &Matrix) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}
