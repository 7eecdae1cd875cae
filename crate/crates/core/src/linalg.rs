//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Floor on the reciprocal condition number below which a system is
/// treated as singular.
pub const RCOND_FLOOR: f64 = 1e-12;

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Reciprocal 2-norm condition number `sigma_min / sigma_max` of a matrix,
/// where `sigma_min` is taken over `min(rows, cols)` values. Zero matrices
/// have rcond 0.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&max), Some(&min)) if max > 0.0 && max.is_finite() => min / max,
        _ => 0.0,
    }
}

/// Solves `a x = b` for a square `a` by LU, rejecting ill-conditioned systems.
pub fn solve_square(a: &DMatrix<f64>, b: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{name}: {}x{} system with {} right-hand rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let rc = rcond(a);
    if !(rc >= RCOND_FLOOR) {
        return Err(Error::RankDeficient {
            name: name.to_string(),
            rcond: rc,
        });
    }
    a.clone().lu().solve(b).ok_or_else(|| Error::RankDeficient {
        name: name.to_string(),
        rcond: rc,
    })
}

pub fn solve_square_vec(a: &DMatrix<f64>, b: &DVector<f64>, name: &str) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_square(a, &m, name)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Maximum absolute entry of `a - a'`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Column-wise sample mean of the rows of `rows` (each a vector of equal length).
pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let s = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= s);
    acc
}
