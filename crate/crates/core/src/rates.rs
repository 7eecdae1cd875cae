//! Closed-form estimation of link misclassification rates.
//!
//! Pairs are split into two cells by the phi indicator (same value of a
//! covariate or not). Within each cell the link frequencies of measure 1,
//! measure 2 and of their cellwise maximum give six moments, which pin down
//! the two rates of each measure together with the link probabilities of
//! both cells. The inversion reduces to a quadratic with a single admissible
//! root.
//!
//! With a single unsymmetrized measure of a symmetric network, the two
//! directed reports `H_ij` and `H_ji` of each unordered pair play the role
//! of the two measures, sharing one pair of rates.
//!
//! Standard errors come from the delta method over the eight group-level
//! summands (three numerators and one denominator per cell). The Jacobian is
//! taken by central differences of the closed-form map.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// |pi1 - pi0| below this means phi carries no information.
pub const NO_VARIATION_TOL: f64 = 1e-8;
/// Relative step of the central differences used for the delta method.
pub const FD_REL_STEP: f64 = 1e-6;
/// Disagreement (in standard errors) across the three pi0 identities that
/// raises a diagnostic.
pub const PI0_DISAGREEMENT_SE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatesMode {
    /// One unsymmetrized measure of a symmetric network.
    Single,
    /// Two conditionally independent measures.
    Two,
}

/// Number of group-level summands.
pub const N_SUMMANDS: usize = 8;

/// Cell moments `psi_a^(t)` for `a` in {0,1} and `t` in {1,2,3}.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMoments {
    pub mode: RatesMode,
    /// `psi1[t-1]`: link frequency of measure t among phi = 1 pairs.
    pub psi1: [f64; 3],
    pub psi0: [f64; 3],
    /// Per group: `(num1_1, num1_2, num1_3, den1, num0_1, num0_2, num0_3, den0)`,
    /// each scaled by the group's pair count.
    pub per_group: Vec<[f64; N_SUMMANDS]>,
    pub group_ids: Vec<String>,
}

impl PsiMoments {
    fn from_summands(mode: RatesMode, per_group: Vec<[f64; N_SUMMANDS]>, group_ids: Vec<String>) -> Result<Self> {
        let mean = mean_summands(&per_group);
        if !(mean[3] > 0.0) {
            return Err(Error::EmptyPhiCell { cell: 1 });
        }
        if !(mean[7] > 0.0) {
            return Err(Error::EmptyPhiCell { cell: 0 });
        }
        let (psi1, psi0) = psi_from_mean(&mean);
        Ok(Self {
            mode,
            psi1,
            psi0,
            per_group,
            group_ids,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.per_group.len()
    }
}

fn mean_summands(per_group: &[[f64; N_SUMMANDS]]) -> [f64; N_SUMMANDS] {
    let mut m = [0.0; N_SUMMANDS];
    for v in per_group {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    let s = per_group.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= s);
    m
}

fn psi_from_mean(m: &[f64; N_SUMMANDS]) -> ([f64; 3], [f64; 3]) {
    (
        [m[0] / m[3], m[1] / m[3], m[2] / m[3]],
        [m[4] / m[7], m[5] / m[7], m[6] / m[7]],
    )
}

/// Moments from two measures over ordered pairs.
pub fn psi_moments_two(ds: &Dataset) -> Result<PsiMoments> {
    if ds.n_measures() != 2 {
        return Err(Error::Invalid(format!(
            "two-measure rates need 2 measures, dataset has {}",
            ds.n_measures()
        )));
    }
    let per_group: Vec<[f64; N_SUMMANDS]> = ds
        .groups
        .par_iter()
        .map(|g| {
            let n = g.n();
            let (h1, h2) = (&g.measures[0], &g.measures[1]);
            let mut v = [0.0; N_SUMMANDS];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let a = f64::from(h1.get(i, j));
                    let b = f64::from(h2.get(i, j));
                    let base = if ds.phi(g, i, j) { 0 } else { 4 };
                    v[base] += a;
                    v[base + 1] += b;
                    v[base + 2] += a.max(b);
                    v[base + 3] += 1.0;
                }
            }
            let w = 1.0 / (n * (n - 1)) as f64;
            v.iter_mut().for_each(|x| *x *= w);
            v
        })
        .collect();
    PsiMoments::from_summands(RatesMode::Two, per_group, ds.groups.iter().map(|g| g.group_id.clone()).collect())
}

/// Moments from one unsymmetrized measure, pairing `H_ij` with `H_ji` over
/// unordered pairs. Uses measure 1.
pub fn psi_moments_single(ds: &Dataset) -> Result<PsiMoments> {
    psi_moments_single_for(ds, 1)
}

pub fn psi_moments_single_for(ds: &Dataset, measure: usize) -> Result<PsiMoments> {
    if measure == 0 || measure > ds.n_measures() {
        return Err(Error::Invalid(format!("dataset has no measure {measure}")));
    }
    let t = measure - 1;
    let per_group: Vec<[f64; N_SUMMANDS]> = ds
        .groups
        .par_iter()
        .map(|g| {
            let n = g.n();
            let h = &g.measures[t];
            let mut v = [0.0; N_SUMMANDS];
            for i in 0..n {
                for j in 0..i {
                    let a = f64::from(h.get(i, j));
                    let b = f64::from(h.get(j, i));
                    let base = if ds.phi(g, i, j) { 0 } else { 4 };
                    v[base] += a;
                    v[base + 1] += b;
                    v[base + 2] += a.max(b);
                    v[base + 3] += 1.0;
                }
            }
            let w = 2.0 / (n * (n - 1)) as f64;
            v.iter_mut().for_each(|x| *x *= w);
            v
        })
        .collect();
    PsiMoments::from_summands(RatesMode::Single, per_group, ds.groups.iter().map(|g| g.group_id.clone()).collect())
}

/// Output of the closed-form inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub pi1: f64,
    pub pi0: f64,
    /// pi0 recovered from measure t = 1, 2, 3.
    pub pi0_by_measure: [f64; 3],
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    pub xi: f64,
    /// The rejected root of the quadratic.
    pub xi_rejected: f64,
    pub discriminant: f64,
}

impl ClosedForm {
    /// Parameter vector in the order of [`param_names`].
    pub fn params(&self, mode: RatesMode) -> Vec<f64> {
        match mode {
            RatesMode::Two => vec![self.p0[0], self.p1[0], self.p0[1], self.p1[1], self.pi1, self.pi0],
            RatesMode::Single => vec![self.p0[0], self.p1[0], self.pi1, self.pi0],
        }
    }
}

pub fn param_names(mode: RatesMode) -> Vec<String> {
    let names: &[&str] = match mode {
        RatesMode::Two => &["p0_1", "p1_1", "p0_2", "p1_2", "pi1", "pi0"],
        RatesMode::Single => &["p0", "p1", "pi1", "pi0"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Inverts the cell moments into rates and link probabilities.
pub fn closed_form(psi1: [f64; 3], psi0: [f64; 3], mode: RatesMode) -> Result<ClosedForm> {
    let (psi1, psi0) = match mode {
        RatesMode::Two => (psi1, psi0),
        RatesMode::Single => {
            let a1 = 0.5 * (psi1[0] + psi1[1]);
            let a0 = 0.5 * (psi0[0] + psi0[1]);
            ([a1, a1, psi1[2]], [a0, a0, psi0[2]])
        }
    };
    let gap = |t: usize| psi0[t] - psi1[t];
    if gap(1).abs() < NO_VARIATION_TOL || !gap(1).is_finite() {
        return Err(Error::NoVariation(format!(
            "psi0 and psi1 of measure 2 coincide ({} vs {})",
            psi0[1], psi1[1]
        )));
    }
    let c2 = match mode {
        RatesMode::Two => gap(0) / gap(1),
        RatesMode::Single => 1.0,
    };
    if !(c2.abs() > 0.0) || !c2.is_finite() {
        return Err(Error::NoVariation("measure 1 does not vary with phi".into()));
    }
    let c1 = psi1[0] - 1.0 + gap(2) / gap(1) - (1.0 - psi1[1]) * c2;
    let c0 = psi1[0] + psi1[1] - psi1[0] * psi1[1] - psi1[2];
    let disc = c1 * c1 + 4.0 * c2 * c0;
    if disc < 0.0 || !disc.is_finite() {
        return Err(Error::NegativeDiscriminant(disc));
    }
    let root = disc.sqrt();
    let xi = (c1 + root) / (2.0 * c2);
    let xi_rejected = (c1 - root) / (2.0 * c2);

    let p0_1 = psi1[0] - c2 * xi;
    let p0_2 = psi1[1] - xi;
    let p0_3 = p0_1 + p0_2 - p0_1 * p0_2;
    let a = [psi1[0] - p0_1, psi1[1] - p0_2, psi1[2] - p0_3];
    let pi1 = a[0] * a[1] / ((1.0 - p0_1) * a[1] + (1.0 - p0_2) * a[0] - a[2]);
    let p0s = [p0_1, p0_2, p0_3];
    let p1 = [1.0 - p0_1 - a[0] / pi1, 1.0 - p0_2 - a[1] / pi1];
    let pi0_by_measure = [0, 1, 2].map(|t| (psi0[t] - p0s[t]) / a[t] * pi1);
    let pi0 = pi0_by_measure[0];
    if !pi1.is_finite() || !pi0.is_finite() || (pi1 - pi0).abs() < NO_VARIATION_TOL {
        return Err(Error::NoVariation(format!("pi1 = {pi1}, pi0 = {pi0}")));
    }
    Ok(ClosedForm {
        p0: [p0_1, p0_2],
        p1,
        pi1,
        pi0,
        pi0_by_measure,
        c2,
        c1,
        c0,
        xi,
        xi_rejected,
        discriminant: disc,
    })
}

/// Validity diagnostics. Flagged estimates are reported but refused by the
/// adjusted estimators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateFlags {
    pub out_of_range: bool,
    pub pi0_disagreement: bool,
    pub messages: Vec<String>,
}

/// Group-level influence terms `tau_s = J (upsilon_s - mean upsilon)` so that
/// `p_hat - p ~ mean_s tau_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateInfluence {
    pub group_ids: Vec<String>,
    pub tau: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesEstimate {
    pub mode: RatesMode,
    /// False-link rate per measure (both entries equal in single mode).
    pub p0: [f64; 2],
    /// Missed-link rate per measure.
    pub p1: [f64; 2],
    pub pi1: f64,
    pub pi0: f64,
    pub pi0_by_measure: [f64; 3],
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    pub xi: f64,
    pub discriminant: f64,
    pub psi1: [f64; 3],
    pub psi0: [f64; 3],
    pub n_groups: usize,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    #[serde(default)]
    pub vcov: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub se: Option<Vec<f64>>,
    #[serde(default)]
    pub influence: Option<RateInfluence>,
    pub flags: RateFlags,
}

impl RatesEstimate {
    /// Known rates with no sampling uncertainty (two entries per measure).
    /// Moment-related fields are zero and `n_groups` is 0.
    pub fn known(p0: [f64; 2], p1: [f64; 2]) -> Self {
        Self {
            mode: RatesMode::Two,
            p0,
            p1,
            pi1: 0.0,
            pi0: 0.0,
            pi0_by_measure: [0.0; 3],
            c2: 0.0,
            c1: 0.0,
            c0: 0.0,
            xi: 0.0,
            discriminant: 0.0,
            psi1: [0.0; 3],
            psi0: [0.0; 3],
            n_groups: 0,
            param_names: param_names(RatesMode::Two),
            params: vec![p0[0], p1[0], p0[1], p1[1], 0.0, 0.0],
            vcov: None,
            se: None,
            influence: None,
            flags: RateFlags::default(),
        }
    }

    /// Rates `(p0, p1)` of measure `t` (1-based).
    pub fn rates_for(&self, t: usize) -> (f64, f64) {
        let i = if self.mode == RatesMode::Single { 0 } else { t - 1 };
        (self.p0[i], self.p1[i])
    }

    /// Indices of `(p0, p1)` of measure `t` in the parameter vector.
    pub fn rate_indices(&self, t: usize) -> (usize, usize) {
        match self.mode {
            RatesMode::Single => (0, 1),
            RatesMode::Two => (2 * (t - 1), 2 * (t - 1) + 1),
        }
    }

    pub fn is_clean(&self) -> bool {
        !self.flags.out_of_range
    }

    pub fn vcov_matrix(&self) -> Option<DMatrix<f64>> {
        let v = self.vcov.as_ref()?;
        let k = v.len();
        Some(DMatrix::from_fn(k, k, |i, j| v[i][j]))
    }
}

fn range_flags(cf: &ClosedForm, mode: RatesMode) -> RateFlags {
    let mut flags = RateFlags::default();
    let measures = if mode == RatesMode::Single { 1 } else { 2 };
    for t in 0..measures {
        let (p0, p1) = (cf.p0[t], cf.p1[t]);
        let ok = (0.0..1.0).contains(&p0) && (0.0..1.0).contains(&p1) && p0 + p1 < 1.0;
        if !ok {
            flags.out_of_range = true;
            flags.messages.push(format!("measure {}: (p0, p1) = ({p0}, {p1}) outside the admissible region", t + 1));
        }
    }
    for (name, pi) in [("pi1", cf.pi1), ("pi0", cf.pi0)] {
        if !(pi > 0.0 && pi <= 1.0) {
            flags.out_of_range = true;
            flags.messages.push(format!("{name} = {pi} outside (0, 1]"));
        }
    }
    flags
}

/// Point estimates from cell moments, without standard errors.
pub fn solve_rates(psi: &PsiMoments) -> Result<RatesEstimate> {
    let cf = closed_form(psi.psi1, psi.psi0, psi.mode)?;
    let flags = range_flags(&cf, psi.mode);
    let (p0, p1) = match psi.mode {
        RatesMode::Two => (cf.p0, cf.p1),
        RatesMode::Single => ([cf.p0[0]; 2], [cf.p1[0]; 2]),
    };
    Ok(RatesEstimate {
        mode: psi.mode,
        p0,
        p1,
        pi1: cf.pi1,
        pi0: cf.pi0,
        pi0_by_measure: cf.pi0_by_measure,
        c2: cf.c2,
        c1: cf.c1,
        c0: cf.c0,
        xi: cf.xi,
        discriminant: cf.discriminant,
        psi1: psi.psi1,
        psi0: psi.psi0,
        n_groups: psi.n_groups(),
        param_names: param_names(psi.mode),
        params: cf.params(psi.mode),
        vcov: None,
        se: None,
        influence: None,
        flags,
    })
}

/// Delta-method covariance of the parameter vector and the per-group
/// influence terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RatesVcov {
    pub vcov: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub tau: Vec<DVector<f64>>,
}

fn params_at(mean: &[f64; N_SUMMANDS], mode: RatesMode) -> Result<Vec<f64>> {
    let (psi1, psi0) = psi_from_mean(mean);
    Ok(closed_form(psi1, psi0, mode)?.params(mode))
}

/// Covariance `J SampleCov(upsilon) J' / S`, with `J` the Jacobian of the
/// closed-form map with respect to the mean summands.
pub fn rates_vcov(psi: &PsiMoments) -> Result<RatesVcov> {
    let s = psi.n_groups();
    if s == 0 {
        return Err(Error::Invalid("no groups".into()));
    }
    let mean = mean_summands(&psi.per_group);
    let k = match psi.mode {
        RatesMode::Two => 6,
        RatesMode::Single => 4,
    };
    let mut jac = DMatrix::zeros(k, N_SUMMANDS);
    for c in 0..N_SUMMANDS {
        let h = if mean[c] != 0.0 { FD_REL_STEP * mean[c].abs() } else { FD_REL_STEP };
        let mut up = mean;
        let mut down = mean;
        up[c] += h;
        down[c] -= h;
        let fu = params_at(&up, psi.mode)?;
        let fd = params_at(&down, psi.mode)?;
        for r in 0..k {
            jac[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    let mean_v = DVector::from_column_slice(&mean);
    let tau: Vec<DVector<f64>> = psi
        .per_group
        .iter()
        .map(|v| &jac * (DVector::from_column_slice(v) - &mean_v))
        .collect();
    let mut vcov = DMatrix::zeros(k, k);
    for t in &tau {
        vcov += t * t.transpose();
    }
    vcov /= (s * s) as f64;
    Ok(RatesVcov {
        vcov,
        jacobian: jac,
        tau,
    })
}

/// Moments, closed-form solution and delta-method covariance in one call.
pub fn estimate_rates(ds: &Dataset, mode: RatesMode) -> Result<RatesEstimate> {
    let psi = match mode {
        RatesMode::Two => psi_moments_two(ds)?,
        RatesMode::Single => psi_moments_single(ds)?,
    };
    estimate_rates_from(&psi)
}

/// Closed-form solution and delta-method covariance from given moments.
pub fn estimate_rates_from(psi: &PsiMoments) -> Result<RatesEstimate> {
    let mut est = solve_rates(psi)?;
    let v = rates_vcov(psi)?;
    let se: Vec<f64> = (0..v.vcov.nrows()).map(|i| v.vcov[(i, i)].max(0.0).sqrt()).collect();
    let se_pi0 = *se.last().expect("pi0 is last");
    for t in 1..3 {
        let d = (est.pi0_by_measure[t] - est.pi0).abs();
        if d > PI0_DISAGREEMENT_SE * se_pi0 {
            est.flags.pi0_disagreement = true;
            est.flags
                .messages
                .push(format!("pi0 from measure {} differs by {d:.3e} (> {PI0_DISAGREEMENT_SE} SE)", t + 1));
        }
    }
    est.vcov = Some(v.vcov.row_iter().map(|r| r.iter().copied().collect()).collect());
    est.se = Some(se);
    est.influence = Some(RateInfluence {
        group_ids: psi.group_ids.clone(),
        tau: v.tau.iter().map(|t| t.iter().copied().collect()).collect(),
    });
    Ok(est)
}
