//! Domain types for grouped network data and the matrix primitives every
//! other module builds on: the affine link adjustment, the within-group
//! demeaning projection and the reduced-form outcome solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rcond, RCOND_FLOOR};

/// Binary adjacency matrix of one group with an empty diagonal.
///
/// Cells are stored as bytes; arithmetic goes through [`Adjacency::to_matrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    cells: Vec<u8>,
}

impl Adjacency {
    /// The empty network on `n` nodes.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            cells: vec![0; n * n],
        }
    }

    /// Builds a network from a link predicate. The diagonal is always empty.
    pub fn from_fn(n: usize, mut link: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && link(i, j) {
                    cells[i * n + j] = 1;
                }
            }
        }
        Self { n, cells }
    }

    /// Builds a network from row-major 0/1 rows, validating the invariants.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut cells = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "adjacency row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::Invalid(format!("adjacency entry ({i},{j}) = {v} is not 0/1")));
                }
                if i == j && v != 0 {
                    return Err(Error::Invalid(format!("adjacency diagonal ({i},{i}) must be 0")));
                }
                cells.push(v);
            }
        }
        Ok(Self { n, cells })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.cells[i * self.n + j]
    }

    #[inline]
    pub fn is_link(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 1
    }

    /// Row `i` as a 0/1 vector including the (zero) diagonal cell.
    pub fn row(&self, i: usize) -> &[u8] {
        &self.cells[i * self.n..(i + 1) * self.n]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| f64::from(self.get(i, j)))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.is_link(j, i))
    }

    /// Cellwise maximum of two networks on the same node set.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine networks of size {} and {}",
                self.n, other.n
            )));
        }
        Ok(Self::from_fn(self.n, |i, j| self.is_link(i, j) || other.is_link(i, j)))
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn link_count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    /// Ordered pairs `(i, j)` with a link.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (0..self.n).filter(move |&j| self.is_link(i, j)).map(move |j| (i, j)))
    }

    /// Row-normalized adjacency: each nonempty row divided by its degree.
    pub fn row_normalized(&self) -> DMatrix<f64> {
        let mut m = self.to_matrix();
        for i in 0..self.n {
            let deg: f64 = m.row(i).sum();
            if deg > 0.0 {
                m.row_mut(i).scale_mut(1.0 / deg);
            }
        }
        m
    }
}

/// The link-adjusted measure `[H - p0 (11' - I)] / (1 - p0 - p1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedMeasure {
    pub matrix: DMatrix<f64>,
    pub p0: f64,
    pub p1: f64,
}

impl AdjustedMeasure {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn check_rates(p0: f64, p1: f64) -> Result<()> {
    if !(p0 >= 0.0 && p1 >= 0.0 && p0 + p1 < 1.0) || !p0.is_finite() || !p1.is_finite() {
        return Err(Error::InvalidRates { p0, p1 });
    }
    Ok(())
}

/// Rescales a noisy measure so that its conditional mean given the true
/// network equals the true network.
pub fn adjust_measure(h: &Adjacency, p0: f64, p1: f64) -> Result<AdjustedMeasure> {
    check_rates(p0, p1)?;
    let scale = 1.0 - p0 - p1;
    let n = h.n();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (f64::from(h.get(i, j)) - p0) / scale
        }
    });
    Ok(AdjustedMeasure { matrix, p0, p1 })
}

/// `[I - 11'/n] M`: subtracts the column means.
pub fn within_transform(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    if n == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    out
}

pub fn within_transform_vec(v: &DVector<f64>) -> DVector<f64> {
    if v.is_empty() {
        return v.clone();
    }
    let mean = v.sum() / v.len() as f64;
    v.add_scalar(-mean)
}

/// Solves `(I - lambda G) y = rhs` by LU. The explicit inverse is never formed.
pub fn reduced_form_solve(g: &DMatrix<f64>, lambda: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = g.nrows();
    if g.ncols() != n || rhs.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "reduced form: G is {}x{}, rhs has {} entries",
            g.nrows(),
            g.ncols(),
            rhs.len()
        )));
    }
    let system = DMatrix::identity(n, n) - g * lambda;
    if lambda != 0.0 {
        let rc = rcond(&system);
        if !(rc >= RCOND_FLOOR) {
            return Err(Error::SingularSystem { rcond: rc });
        }
    }
    system
        .lu()
        .solve(rhs)
        .ok_or(Error::SingularSystem { rcond: 0.0 })
}

/// One group's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group_id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// One or two noisy measures of the network.
    pub measures: Vec<Adjacency>,
    /// The true network, known only in simulation.
    pub truth: Option<Adjacency>,
    /// Member labels in row order; `1..=n` unless set.
    pub node_ids: Vec<String>,
}

impl GroupSample {
    pub fn new(
        group_id: impl Into<String>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        measures: Vec<Adjacency>,
        truth: Option<Adjacency>,
    ) -> Result<Self> {
        let group_id = group_id.into();
        let n = y.len();
        if n < 3 {
            return Err(Error::Invalid(format!("group {group_id} has {n} members; need at least 3")));
        }
        if x.nrows() != n || x.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "group {group_id}: X is {}x{} for {n} outcomes",
                x.nrows(),
                x.ncols()
            )));
        }
        if measures.is_empty() || measures.len() > 2 {
            return Err(Error::Invalid(format!(
                "group {group_id}: expected 1 or 2 measures, got {}",
                measures.len()
            )));
        }
        for a in measures.iter().chain(truth.iter()) {
            if a.n() != n {
                return Err(Error::ShapeMismatch(format!(
                    "group {group_id}: adjacency of size {} for {n} members",
                    a.n()
                )));
            }
        }
        Ok(Self {
            group_id,
            node_ids: (1..=n).map(|i| i.to_string()).collect(),
            y,
            x,
            measures,
            truth,
        })
    }

    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "group {}: {} node ids for {} members",
                self.group_id,
                ids.len(),
                self.n()
            )));
        }
        self.node_ids = ids;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    /// Measure `t`, counted from 1.
    pub fn measure(&self, t: usize) -> Result<&Adjacency> {
        t.checked_sub(1)
            .and_then(|i| self.measures.get(i))
            .ok_or_else(|| Error::Invalid(format!("group {} has no measure {t}", self.group_id)))
    }
}

/// An ordered sample of independent groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub groups: Vec<GroupSample>,
    pub covariate_names: Vec<String>,
    /// Covariate whose equality across a pair defines the phi indicator.
    pub phi_column: usize,
    /// Per measure: whether it was symmetrized (both cells from one report).
    pub symmetrized: Vec<bool>,
}

impl Dataset {
    pub fn new(
        groups: Vec<GroupSample>,
        covariate_names: Vec<String>,
        phi_column: usize,
        symmetrized: Vec<bool>,
    ) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::Invalid("dataset has no groups".into()))?;
        let k = first.k();
        let t = first.measures.len();
        if covariate_names.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{} covariate names for K = {k}",
                covariate_names.len()
            )));
        }
        if phi_column >= k {
            return Err(Error::Invalid(format!("phi column {phi_column} out of range for K = {k}")));
        }
        if symmetrized.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "{} symmetrized flags for {t} measures",
                symmetrized.len()
            )));
        }
        for g in &groups {
            if g.k() != k || g.measures.len() != t {
                return Err(Error::ShapeMismatch(format!(
                    "group {} has K = {}, {} measures; expected K = {k}, {t} measures",
                    g.group_id,
                    g.k(),
                    g.measures.len()
                )));
            }
        }
        Ok(Self {
            groups,
            covariate_names,
            phi_column,
            symmetrized,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn k(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_measures(&self) -> usize {
        self.symmetrized.len()
    }

    pub fn has_truth(&self) -> bool {
        self.groups.iter().all(|g| g.truth.is_some())
    }

    /// `phi_ij = 1{x_i = x_j}` on the phi column of group `g`.
    #[inline]
    pub fn phi(&self, g: &GroupSample, i: usize, j: usize) -> bool {
        g.x[(i, self.phi_column)] == g.x[(j, self.phi_column)]
    }
}

/// Peer effect and covariate coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub lambda: f64,
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            lambda: v[0],
            beta: v.iter().skip(1).copied().collect(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.beta.len() + 1,
            std::iter::once(self.lambda).chain(self.beta.iter().copied()),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.lambda.is_finite() && self.beta.iter().all(|b| b.is_finite())
    }
}
