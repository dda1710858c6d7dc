//! Small numeric kernels: the logistic function and a dense LU solve.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Numerically stable logistic sigmoid.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`] for `p` in `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pivots smaller than this (relative to the largest entry) count as singular.
const SINGULAR_RTOL: f64 = 1e-14;

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
/// `a` is square `n x n`, `b` is `n x k`.
pub fn solve_dense(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "cannot solve {:?} system with {:?} right-hand side",
            a.dim(),
            b.dim()
        )));
    }
    let k = b.ncols();
    let mut lu = a.as_standard_layout().into_owned();
    let mut x = b.as_standard_layout().into_owned();
    let scale = lu
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);

    for col in 0..n {
        let (pivot_row, pivot) =
            (col..n)
                .map(|r| (r, lu[[r, col]]))
                .fold((col, 0.0f64), |best, (r, v)| {
                    if v.abs() > best.1.abs() {
                        (r, v)
                    } else {
                        best
                    }
                });
        if !(pivot.abs() > SINGULAR_RTOL * scale) {
            return Err(Error::Singular { column: col, pivot });
        }
        if pivot_row != col {
            for j in 0..n {
                lu.swap([col, j], [pivot_row, j]);
            }
            for j in 0..k {
                x.swap([col, j], [pivot_row, j]);
            }
        }
        let (upper, mut lower) = lu.view_mut().split_at(ndarray::Axis(0), col + 1);
        let pivot_row_vals = upper.row(col);
        let (x_upper, mut x_lower) = x.view_mut().split_at(ndarray::Axis(0), col + 1);
        let x_pivot = x_upper.row(col);
        for (mut row, mut rhs) in lower.rows_mut().into_iter().zip(x_lower.rows_mut()) {
            let factor = row[col] / pivot;
            if factor == 0.0 {
                continue;
            }
            row[col] = 0.0;
            for j in col + 1..n {
                row[j] -= factor * pivot_row_vals[j];
            }
            for j in 0..k {
                rhs[j] -= factor * x_pivot[j];
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = lu[[col, col]];
        for j in 0..k {
            let mut acc = x[[col, j]];
            for m in col + 1..n {
                acc -= lu[[col, m]] * x[[m, j]];
            }
            x[[col, j]] = acc / pivot;
        }
    }
    Ok(x)
}
