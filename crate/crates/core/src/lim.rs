//! Unbiased linear-in-means weights under misclassified links.
//!
//! For row `i` of an `n`-node group, let `g` and `h` be the true and observed
//! off-diagonal cells (length `m = n - 1`, first coordinate in the most
//! significant bit of the support index). With the per-cell flip matrix
//! `T[g][h] = P(h | g)` the row's conditional law is `T^{(x) m}`, and the
//! weight `W~(h)` satisfies `sum_h P(h | g) W~(h) = g_j / sum(g)`.
//! Hence `W~ = (T^-1)^{(x) m} V~`, which factorizes to
//!
//! `W~_ij(h) = Tinv[h_j][1] * integral_0^1 prod_{k != i,j} (Tinv[h_k][0] + Tinv[h_k][1] x) dx`.
//!
//! The integral depends only on `h_j` and the number of ones among the other
//! cells, so a group needs `2 (n - 1)` distinct values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::solve_square_vec;
use crate::model::Adjacency;

/// Largest group for the dense `2^(n-1)` square matrices.
pub const DENSE_CAP: usize = 12;
/// Largest group for the structured brute-force solve.
pub const BRUTE_FORCE_CAP: usize = 20;

const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipMatrix {
    /// `t[g][h] = P(h | g)`.
    pub t: [[f64; 2]; 2],
    pub inv: [[f64; 2]; 2],
}

impl FlipMatrix {
    pub fn new(p0: f64, p1: f64) -> Result<Self> {
        let det = 1.0 - p0 - p1;
        if !det.is_finite() || det.abs() < DEGENERATE_TOL {
            return Err(Error::DegenerateRates(det));
        }
        Ok(Self {
            t: [[1.0 - p0, p0], [p1, 1.0 - p1]],
            inv: [[(1.0 - p1) / det, -p0 / det], [-p1 / det, (1.0 - p0) / det]],
        })
    }
}

/// Cells of support point `idx` over `m` coordinates.
pub fn support_point(idx: usize, m: usize) -> Vec<u8> {
    (0..m).map(|k| ((idx >> (m - 1 - k)) & 1) as u8).collect()
}

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::Invalid(format!("group size {n} is below 3")));
    }
    if n > cap {
        return Err(Error::TooLarge { n, cap });
    }
    Ok(())
}

/// Target `V~[g] = g_j / sum(g)` (zero for the empty row).
pub fn target_weights(m: usize, j: usize) -> Vec<f64> {
    (0..1usize << m)
        .map(|idx| {
            let ones = idx.count_ones();
            if ones == 0 || (idx >> (m - 1 - j)) & 1 == 0 {
                0.0
            } else {
                1.0 / ones as f64
            }
        })
        .collect()
}

/// Dense `P[g, h] = P(h | g)` for one row of an `n`-node group.
pub fn cond_prob_matrix(n: usize, p0: f64, p1: f64) -> Result<DMatrix<f64>> {
    check_cap(n, DENSE_CAP)?;
    let f = FlipMatrix::new(p0, p1)?;
    Ok(kron_power(&f.t, n - 1))
}

/// Dense `(T^-1)^{(x) (n-1)}`.
pub fn inverse_kron(n: usize, p0: f64, p1: f64) -> Result<DMatrix<f64>> {
    check_cap(n, DENSE_CAP)?;
    let f = FlipMatrix::new(p0, p1)?;
    Ok(kron_power(&f.inv, n - 1))
}

fn kron_power(t: &[[f64; 2]; 2], m: usize) -> DMatrix<f64> {
    let base = DMatrix::from_fn(2, 2, |r, c| t[r][c]);
    let mut out = DMatrix::from_element(1, 1, 1.0);
    for _ in 0..m {
        out = out.kronecker(&base);
    }
    out
}

/// Weights for coordinate `j` by factorizing the dense system.
pub fn lim_weights_dense(n: usize, j: usize, p0: f64, p1: f64) -> Result<Vec<f64>> {
    let p = cond_prob_matrix(n, p0, p1)?;
    let v = DVector::from_vec(target_weights(n - 1, j));
    Ok(solve_square_vec(&p, &v, "conditional probability matrix")?.iter().copied().collect())
}

/// Weights for coordinate `j` over the whole support, applying `T^-1` along
/// each axis of the `2^(n-1)` tensor in turn.
pub fn lim_weights_bruteforce(n: usize, j: usize, p0: f64, p1: f64) -> Result<Vec<f64>> {
    check_cap(n, BRUTE_FORCE_CAP)?;
    let m = n - 1;
    if j >= m {
        return Err(Error::Invalid(format!("coordinate {j} out of range for {m} cells")));
    }
    let f = FlipMatrix::new(p0, p1)?;
    let mut v = target_weights(m, j);
    for axis in 0..m {
        let stride = 1usize << (m - 1 - axis);
        for base in 0..v.len() {
            if base & stride != 0 {
                continue;
            }
            let (x0, x1) = (v[base], v[base | stride]);
            v[base] = f.inv[0][0] * x0 + f.inv[0][1] * x1;
            v[base | stride] = f.inv[1][0] * x0 + f.inv[1][1] * x1;
        }
    }
    Ok(v)
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(k: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (k as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for l in 2..=k {
                let p2 = ((2 * l - 1) as f64 * x * p1 - (l - 1) as f64 * p0) / l as f64;
                p0 = p1;
                p1 = p2;
            }
            let pk = if k == 0 { 1.0 } else { p1 };
            let pkm1 = if k == 0 { 0.0 } else { p0 };
            dp = k as f64 * (x * pk - pkm1) / (x * x - 1.0);
            let dx = pk / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

/// Precomputed weights for one rate pair and group size.
#[derive(Debug, Clone)]
pub struct LimTable {
    n: usize,
    /// `values[h_j][q]` with `q` ones among the other `n - 2` cells.
    values: [Vec<f64>; 2],
}

impl LimTable {
    pub fn new(n: usize, p0: f64, p1: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::Invalid(format!("group size {n} is below 3")));
        }
        let f = FlipMatrix::new(p0, p1)?;
        let others = n - 2;
        let nodes = gauss_legendre(others / 2 + 1);
        let integral: Vec<f64> = (0..=others)
            .map(|q| {
                nodes
                    .iter()
                    .map(|&(x, w)| {
                        let a = f.inv[0][0] + f.inv[0][1] * x;
                        let b = f.inv[1][0] + f.inv[1][1] * x;
                        w * a.powi((others - q) as i32) * b.powi(q as i32)
                    })
                    .sum()
            })
            .collect();
        let values = [
            integral.iter().map(|v| f.inv[0][1] * v).collect(),
            integral.iter().map(|v| f.inv[1][1] * v).collect(),
        ];
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Weight on `j` given its cell and the ones count among the rest.
    pub fn get(&self, h_j: u8, ones_others: usize) -> f64 {
        self.values[usize::from(h_j != 0)][ones_others]
    }
}

/// Weight on coordinate `j` for the observed row cells `h` (length `n - 1`).
pub fn lim_weight_fast(h: &[u8], j: usize, p0: f64, p1: f64) -> Result<f64> {
    if j >= h.len() {
        return Err(Error::Invalid(format!("coordinate {j} out of range for {} cells", h.len())));
    }
    let table = LimTable::new(h.len() + 1, p0, p1)?;
    let ones = h.iter().filter(|&&c| c != 0).count() - usize::from(h[j] != 0);
    Ok(table.get(h[j], ones))
}

/// `W~` for an observed adjacency: entry `(i, j)` is the weight on `y_j`
/// in the unbiased estimate of `i`'s peer mean.
pub fn lim_transform_group(h: &Adjacency, p0: f64, p1: f64) -> Result<DMatrix<f64>> {
    let n = h.n();
    let table = LimTable::new(n, p0, p1)?;
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let ones = h.row(i).iter().filter(|&&c| c != 0).count();
        for j in 0..n {
            if i != j {
                let hij = h.get(i, j);
                w[(i, j)] = table.get(hij, ones - usize::from(hij != 0));
            }
        }
    }
    Ok(w)
}

/// `W~_12` over the four observed configurations `(h12, h13)` of a 3-node
/// group, in support order `00, 01, 10, 11`.
pub fn three_node_table(p0: f64, p1: f64) -> Result<[f64; 4]> {
    let t = LimTable::new(3, p0, p1)?;
    Ok([t.get(0, 0), t.get(0, 1), t.get(1, 0), t.get(1, 1)])
}
