//! Small dense and tridiagonal linear algebra used by the PDE solver and
//! the least-squares fits.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Thomas algorithm for a tridiagonal system.
///
/// `lower[i]` multiplies `x[i-1]` in row `i` (so `lower[0]` is unused),
/// `upper[i]` multiplies `x[i+1]` in row `i` (`upper[n-1]` unused).
pub fn solve_tridiagonal<R: Real>(
    lower: &[R],
    diag: &[R],
    upper: &[R],
    rhs: &[R],
) -> Result<Vec<R>> {
    let n = diag.len();
    if n == 0 || lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Usage(format!(
            "tridiagonal system with inconsistent lengths ({}, {}, {}, {})",
            lower.len(),
            n,
            upper.len(),
            rhs.len()
        )));
    }
    let tiny = R::min_positive_value() * R::c(1e4);
    let mut c_star = vec![R::zero(); n];
    let mut d_star = vec![R::zero(); n];
    let mut pivot = diag[0];
    if pivot.abs() <= tiny {
        return Err(Error::Numerical("singular tridiagonal system".into()));
    }
    c_star[0] = upper[0] / pivot;
    d_star[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c_star[i - 1];
        if pivot.abs() <= tiny {
            return Err(Error::Numerical("singular tridiagonal system".into()));
        }
        if i + 1 < n {
            c_star[i] = upper[i] / pivot;
        }
        d_star[i] = (rhs[i] - lower[i] * d_star[i - 1]) / pivot;
    }
    let mut x = d_star;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c_star[i] * next;
    }
    Ok(x)
}

/// Gaussian elimination with partial pivoting; consumes the inputs.
pub fn solve_dense<R: Real>(mut a: Vec<Vec<R>>, mut b: Vec<R>) -> Result<Vec<R>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(Error::Usage("dense system with inconsistent shape".into()));
    }
    for col in 0..n {
        let mut best = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[best][col].abs() {
                best = row;
            }
        }
        a.swap(col, best);
        b.swap(col, best);
        let pivot = a[col][col];
        if pivot.abs() <= R::min_positive_value() * R::c(1e4) {
            return Err(Error::Numerical("singular dense system".into()));
        }
        for row in col + 1..n {
            let factor = a[row][col] / pivot;
            if factor != R::zero() {
                for k in col..n {
                    let v = a[col][k];
                    a[row][k] -= factor * v;
                }
                let v = b[col];
                b[row] -= factor * v;
            }
        }
    }
    let mut x = vec![R::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Pairwise (cascade) summation; the result does not depend on how callers
/// chunk their data, which keeps reductions reproducible.
pub fn pairwise_sum<R: Real>(xs: &[R]) -> R {
    if xs.len() <= 32 {
        let mut acc = R::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
