//! Two-stage least squares for peer effects on grouped networks.
//!
//! Variants differ in the peer regressor and its instruments:
//!
//! | variant  | peer regressor | default instruments            |
//! |----------|----------------|--------------------------------|
//! | ols      | none           | X                              |
//! | naive    | `H y`          | `(H X, X)`                     |
//! | adjusted | `W y`          | `(H' X, X)` or `(H^(3-t) X, X)`|
//! | oracle   | `G y`          | `(G X, X)`                     |
//! | s2sls    | both `W^(t) y` | block-diagonal cross-measure   |
//!
//! Covariances are clustered by group. For the adjusted variants the score
//! of each group is corrected for the sampling error of the estimated
//! misclassification rates through their influence terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lim::lim_transform_group;
use crate::linalg::{rcond, singular_values, solve_square, solve_square_vec, RCOND_FLOOR};
use crate::model::{adjust_measure, within_transform, within_transform_vec, Adjacency, Dataset, GroupSample, Theta};
use crate::rates::RatesEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ols,
    Naive,
    Adjusted,
    Oracle,
    S2sls,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ols => "ols",
            Variant::Naive => "naive",
            Variant::Adjusted => "adjusted",
            Variant::Oracle => "oracle",
            Variant::S2sls => "s2sls",
        }
    }
}

/// Network whose product with X instruments the peer regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentSource {
    /// `H^(t) X`, the regressor's own measure.
    SameMeasure,
    /// `H^(3-t) X`, the other measure.
    CrossMeasure,
    /// `H^(t)' X`; valid only when the cells of the measure are independent.
    Transpose,
    /// `G X`, the true network.
    TrueNetwork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffectsMode {
    #[default]
    None,
    /// Demean every column within each group.
    Within,
}

/// Whether peers enter as a sum or as a mean of linked outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerForm {
    #[default]
    Sums,
    /// Row-normalized network; the adjusted variant uses the
    /// linear-in-means transform.
    Means,
}

fn default_measure() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub variant: Variant,
    /// Measure (1 or 2) feeding the peer regressor.
    #[serde(default = "default_measure")]
    pub regressor_measure: usize,
    /// `None` picks the variant's default.
    #[serde(default)]
    pub instruments: Option<InstrumentSource>,
    #[serde(default)]
    pub fixed_effects: FixedEffectsMode,
    #[serde(default)]
    pub peer_form: PeerForm,
    /// Add the first-stage rate correction to the clustered scores when
    /// influence terms are available.
    #[serde(default = "default_true")]
    pub correct_first_stage: bool,
    /// Required by the adjusted variants.
    #[serde(skip)]
    pub rates: Option<RatesEstimate>,
}

impl EstimatorSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            regressor_measure: 1,
            instruments: None,
            fixed_effects: FixedEffectsMode::None,
            peer_form: PeerForm::Sums,
            correct_first_stage: true,
            rates: None,
        }
    }

    pub fn measure(mut self, t: usize) -> Self {
        self.regressor_measure = t;
        self
    }

    pub fn instruments(mut self, source: InstrumentSource) -> Self {
        self.instruments = Some(source);
        self
    }

    pub fn within(mut self) -> Self {
        self.fixed_effects = FixedEffectsMode::Within;
        self
    }

    pub fn fixed_effects(mut self, fe: FixedEffectsMode) -> Self {
        self.fixed_effects = fe;
        self
    }

    pub fn peer_form(mut self, form: PeerForm) -> Self {
        self.peer_form = form;
        self
    }

    pub fn with_rates(mut self, rates: RatesEstimate) -> Self {
        self.rates = Some(rates);
        self
    }

    pub fn without_correction(mut self) -> Self {
        self.correct_first_stage = false;
        self
    }

    /// Instruments actually used for a dataset with `n_measures` measures.
    pub fn resolved_instruments(&self, n_measures: usize) -> Option<InstrumentSource> {
        if let Some(s) = self.instruments {
            return Some(s);
        }
        match self.variant {
            Variant::Ols => None,
            Variant::Naive => Some(InstrumentSource::SameMeasure),
            Variant::Adjusted | Variant::S2sls if n_measures == 2 => Some(InstrumentSource::CrossMeasure),
            Variant::Adjusted | Variant::S2sls => Some(InstrumentSource::Transpose),
            Variant::Oracle => Some(InstrumentSource::TrueNetwork),
        }
    }

    /// Short label, e.g. `adjusted[W1;H2X]`.
    pub fn label(&self, n_measures: usize) -> String {
        let t = self.regressor_measure;
        let other = 3 - t.min(2);
        let reg = match self.variant {
            Variant::Ols => return "ols".into(),
            Variant::S2sls => return "s2sls".into(),
            Variant::Naive => format!("H{t}y"),
            Variant::Adjusted => format!("W{t}y"),
            Variant::Oracle => "Gy".into(),
        };
        let iv = match self.resolved_instruments(n_measures) {
            Some(InstrumentSource::SameMeasure) => format!("H{t}X"),
            Some(InstrumentSource::CrossMeasure) => format!("H{other}X"),
            Some(InstrumentSource::Transpose) => format!("H{t}'X"),
            Some(InstrumentSource::TrueNetwork) => "GX".into(),
            None => "X".into(),
        };
        format!("{}[{reg};{iv}]", self.variant.as_str())
    }
}

/// One group's rows of the stacked system.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    pub y: DVector<f64>,
    pub r: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Derivative of the peer column with respect to the rate parameter
    /// vector, when a first-stage correction applies.
    pub dpeer: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub blocks: Vec<GroupBlock>,
    pub names: Vec<String>,
    /// Whether the first regressor is a peer outcome.
    pub has_peer: bool,
}

impl Design {
    /// `(Y, R, Z)` stacked over groups in dataset order.
    pub fn stacked(&self) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let rows: usize = self.blocks.iter().map(|b| b.y.len()).sum();
        let (kr, kz) = self
            .blocks
            .first()
            .map(|b| (b.r.ncols(), b.z.ncols()))
            .unwrap_or((0, 0));
        let mut y = DVector::zeros(rows);
        let mut r = DMatrix::zeros(rows, kr);
        let mut z = DMatrix::zeros(rows, kz);
        let mut at = 0;
        for b in &self.blocks {
            let n = b.y.len();
            y.rows_mut(at, n).copy_from(&b.y);
            r.rows_mut(at, n).copy_from(&b.r);
            z.rows_mut(at, n).copy_from(&b.z);
            at += n;
        }
        (y, r, z)
    }

    /// `(Z'R, Z'Z, Z'Y)` summed over groups in order.
    pub fn cross_products(&self) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let parts: Vec<_> = self
            .blocks
            .par_iter()
            .map(|b| {
                let zt = b.z.transpose();
                (&zt * &b.r, &zt * &b.z, &zt * &b.y)
            })
            .collect();
        let (kr, kz) = self
            .blocks
            .first()
            .map(|b| (b.r.ncols(), b.z.ncols()))
            .unwrap_or((0, 0));
        let mut a = DMatrix::zeros(kz, kr);
        let mut bm = DMatrix::zeros(kz, kz);
        let mut c = DVector::zeros(kz);
        for (pa, pb, pc) in parts {
            a += pa;
            bm += pb;
            c += pc;
        }
        (a, bm, c)
    }
}

fn instrument_network(g: &GroupSample, source: InstrumentSource, t: usize, form: PeerForm) -> Result<DMatrix<f64>> {
    let adj: Adjacency = match source {
        InstrumentSource::SameMeasure => g.measure(t)?.clone(),
        InstrumentSource::CrossMeasure => g.measure(3 - t)?.clone(),
        InstrumentSource::Transpose => g.measure(t)?.transpose(),
        InstrumentSource::TrueNetwork => g.truth.clone().ok_or(Error::MissingTruth)?,
    };
    Ok(match form {
        PeerForm::Sums => adj.to_matrix(),
        PeerForm::Means => adj.row_normalized(),
    })
}

/// Derivative of `W y` with respect to `(p0, p1)` for the linear adjustment.
fn adjusted_peer_derivative(h: &Adjacency, y: &DVector<f64>, p0: f64, p1: f64) -> (DVector<f64>, DVector<f64>) {
    let hy = h.to_matrix() * y;
    let total = y.sum();
    let denom = (1.0 - p0 - p1).powi(2);
    let others = DVector::from_fn(y.len(), |i, _| total - y[i]);
    let d0 = (&hy - &others * (1.0 - p1)) / denom;
    let d1 = (&hy - &others * p0) / denom;
    (d0, d1)
}

fn lim_peer(h: &Adjacency, y: &DVector<f64>, p0: f64, p1: f64) -> Result<DVector<f64>> {
    Ok(lim_transform_group(h, p0, p1)? * y)
}

fn check_rates_usable(spec: &EstimatorSpec) -> Result<&RatesEstimate> {
    let rates = spec
        .rates
        .as_ref()
        .ok_or_else(|| Error::MissingRates("no rates supplied".into()))?;
    if !rates.is_clean() {
        return Err(Error::MissingRates(format!("rates are flagged: {}", rates.flags.messages.join("; "))));
    }
    Ok(rates)
}

/// Influence terms of the rates, aligned with the dataset's groups, or
/// `None` when no correction applies.
fn rate_influence<'a>(ds: &Dataset, spec: &'a EstimatorSpec) -> Result<Option<Vec<DVector<f64>>>> {
    if !spec.correct_first_stage || !matches!(spec.variant, Variant::Adjusted | Variant::S2sls) {
        return Ok(None);
    }
    let Some(infl) = spec.rates.as_ref().and_then(|r| r.influence.as_ref()) else {
        return Ok(None);
    };
    if infl.tau.len() != ds.n_groups()
        || infl.group_ids.iter().zip(&ds.groups).any(|(id, g)| *id != g.group_id)
    {
        return Err(Error::ShapeMismatch(
            "rate influence terms do not line up with the dataset's groups".into(),
        ));
    }
    Ok(Some(infl.tau.iter().map(|t| DVector::from_column_slice(t)).collect()))
}

fn validate_spec(ds: &Dataset, spec: &EstimatorSpec) -> Result<()> {
    let t = spec.regressor_measure;
    if t == 0 || t > ds.n_measures() {
        return Err(Error::Invalid(format!("dataset has no measure {t}")));
    }
    let source = spec.resolved_instruments(ds.n_measures());
    if matches!(source, Some(InstrumentSource::CrossMeasure)) && ds.n_measures() != 2 {
        return Err(Error::Invalid("cross-measure instruments need two measures".into()));
    }
    if matches!(source, Some(InstrumentSource::Transpose)) && ds.symmetrized[t - 1] {
        return Err(Error::Invalid(format!(
            "transpose instruments need independent cells; measure {t} is symmetrized"
        )));
    }
    if (spec.variant == Variant::Oracle || matches!(source, Some(InstrumentSource::TrueNetwork))) && !ds.has_truth() {
        return Err(Error::MissingTruth);
    }
    if matches!(spec.variant, Variant::Adjusted | Variant::S2sls) {
        check_rates_usable(spec)?;
    }
    if spec.variant == Variant::S2sls && ds.n_measures() != 2 {
        return Err(Error::Invalid("stacked 2SLS needs two measures".into()));
    }
    Ok(())
}

/// Rows of one structural form for one group (before any demeaning).
fn form_block(
    ds: &Dataset,
    g: &GroupSample,
    spec: &EstimatorSpec,
    t: usize,
    n_rate_params: Option<usize>,
) -> Result<GroupBlock> {
    let n = g.n();
    let k = ds.k();
    let y = g.y.clone();
    if spec.variant == Variant::Ols {
        return Ok(GroupBlock {
            y,
            r: g.x.clone(),
            z: g.x.clone(),
            dpeer: None,
        });
    }
    let form = spec.peer_form;
    let mut dpeer = None;
    let peer = match spec.variant {
        Variant::Naive => {
            let h = g.measure(t)?;
            match form {
                PeerForm::Sums => h.to_matrix() * &y,
                PeerForm::Means => h.row_normalized() * &y,
            }
        }
        Variant::Oracle => {
            let gt = g.truth.as_ref().ok_or(Error::MissingTruth)?;
            match form {
                PeerForm::Sums => gt.to_matrix() * &y,
                PeerForm::Means => gt.row_normalized() * &y,
            }
        }
        Variant::Adjusted | Variant::S2sls => {
            let rates = check_rates_usable(spec)?;
            let (p0, p1) = rates.rates_for(t);
            let h = g.measure(t)?;
            let peer = match form {
                PeerForm::Sums => adjust_measure(h, p0, p1)?.matrix * &y,
                PeerForm::Means => lim_peer(h, &y, p0, p1)?,
            };
            if let Some(np) = n_rate_params {
                let (d0, d1) = match form {
                    PeerForm::Sums => adjusted_peer_derivative(h, &y, p0, p1),
                    PeerForm::Means => {
                        let step = 1e-6;
                        let d0 = (lim_peer(h, &y, p0 + step, p1)? - lim_peer(h, &y, p0 - step, p1)?) / (2.0 * step);
                        let d1 = (lim_peer(h, &y, p0, p1 + step)? - lim_peer(h, &y, p0, p1 - step)?) / (2.0 * step);
                        (d0, d1)
                    }
                };
                let (i0, i1) = rates.rate_indices(t);
                let mut d = DMatrix::zeros(n, np);
                d.set_column(i0, &d0);
                d.set_column(i1, &d1);
                dpeer = Some(d);
            }
            peer
        }
        Variant::Ols => unreachable!(),
    };
    let source = spec
        .resolved_instruments(ds.n_measures())
        .expect("peer variants always have instruments");
    let nx = instrument_network(g, source, t, form)? * &g.x;
    let mut r = DMatrix::zeros(n, k + 1);
    r.set_column(0, &peer);
    r.columns_mut(1, k).copy_from(&g.x);
    let mut z = DMatrix::zeros(n, 2 * k);
    z.columns_mut(0, k).copy_from(&nx);
    z.columns_mut(k, k).copy_from(&g.x);
    Ok(GroupBlock { y, r, z, dpeer })
}

fn demean_block(b: GroupBlock) -> GroupBlock {
    GroupBlock {
        y: within_transform_vec(&b.y),
        r: within_transform(&b.r),
        z: within_transform(&b.z),
        dpeer: b.dpeer.as_ref().map(within_transform),
    }
}

fn param_names(ds: &Dataset, has_peer: bool) -> Vec<String> {
    let mut names = Vec::with_capacity(ds.k() + 1);
    if has_peer {
        names.push("lambda".to_string());
    }
    names.extend(ds.covariate_names.iter().cloned());
    names
}

/// Per-group regressors and instruments for a single structural form.
pub fn build_design(ds: &Dataset, spec: &EstimatorSpec) -> Result<Design> {
    if spec.variant == Variant::S2sls {
        return build_stacked_design(ds, spec);
    }
    validate_spec(ds, spec)?;
    let n_rate_params = rate_influence(ds, spec)?.map(|tau| tau.first().map_or(0, |t| t.len()));
    let blocks = ds
        .groups
        .par_iter()
        .map(|g| {
            let b = form_block(ds, g, spec, spec.regressor_measure, n_rate_params)?;
            Ok(match spec.fixed_effects {
                FixedEffectsMode::None => b,
                FixedEffectsMode::Within => demean_block(b),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let has_peer = spec.variant != Variant::Ols;
    Ok(Design {
        blocks,
        names: param_names(ds, has_peer),
        has_peer,
    })
}

/// Both adjusted forms stacked per group, with block-diagonal instruments
/// `diag(Z^(1), Z^(2))`, `Z^(t) = (H^(3-t) X, X)`.
fn build_stacked_design(ds: &Dataset, spec: &EstimatorSpec) -> Result<Design> {
    validate_spec(ds, spec)?;
    let n_rate_params = rate_influence(ds, spec)?.map(|tau| tau.first().map_or(0, |t| t.len()));
    let mut single = spec.clone();
    single.variant = Variant::Adjusted;
    let blocks = ds
        .groups
        .par_iter()
        .map(|g| {
            let mut parts = Vec::with_capacity(2);
            for t in 1..=2 {
                let b = form_block(ds, g, &single, t, n_rate_params)?;
                parts.push(match spec.fixed_effects {
                    FixedEffectsMode::None => b,
                    FixedEffectsMode::Within => demean_block(b),
                });
            }
            let n = g.n();
            let (kr, kz) = (parts[0].r.ncols(), parts[0].z.ncols());
            let mut y = DVector::zeros(2 * n);
            let mut r = DMatrix::zeros(2 * n, kr);
            let mut z = DMatrix::zeros(2 * n, 2 * kz);
            let mut dpeer = n_rate_params.map(|np| DMatrix::zeros(2 * n, np));
            for (i, p) in parts.iter().enumerate() {
                y.rows_mut(i * n, n).copy_from(&p.y);
                r.rows_mut(i * n, n).copy_from(&p.r);
                z.view_mut((i * n, i * kz), (n, kz)).copy_from(&p.z);
                if let (Some(d), Some(pd)) = (dpeer.as_mut(), p.dpeer.as_ref()) {
                    d.rows_mut(i * n, n).copy_from(pd);
                }
            }
            Ok(GroupBlock { y, r, z, dpeer })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Design {
        blocks,
        names: param_names(ds, true),
        has_peer: true,
    })
}

/// 2SLS point estimate and the cross products it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TslsResult {
    pub theta: DVector<f64>,
    /// `Z'R`
    pub a: DMatrix<f64>,
    /// `Z'Z`
    pub b: DMatrix<f64>,
    /// `Z'Y`
    pub c: DVector<f64>,
}

/// `(A'B^-1 A)^-1 A'B^-1 c` by factorization.
pub fn tsls_from_moments(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<TslsResult> {
    if a.nrows() < a.ncols() {
        return Err(Error::RankDeficient {
            name: format!("Z'R ({} instruments for {} regressors)", a.nrows(), a.ncols()),
            rcond: 0.0,
        });
    }
    let rc_a = rcond(&a);
    if !(rc_a >= RCOND_FLOOR) {
        return Err(Error::RankDeficient {
            name: "Z'R".into(),
            rcond: rc_a,
        });
    }
    let b_inv_a = solve_square(&b, &a, "Z'Z")?;
    let m = a.transpose() * &b_inv_a;
    let rhs = b_inv_a.transpose() * &c;
    let theta = solve_square_vec(&m, &rhs, "A'B^-1A")?;
    Ok(TslsResult { theta, a, b, c })
}

/// 2SLS of `Y` on `R` with instruments `Z`.
pub fn tsls(y: &DVector<f64>, r: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<TslsResult> {
    if y.len() != r.nrows() || y.len() != z.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "Y has {} rows, R {}, Z {}",
            y.len(),
            r.nrows(),
            z.nrows()
        )));
    }
    let zt = z.transpose();
    tsls_from_moments(&zt * r, &zt * z, &zt * y)
}

/// First-stage correction inputs: `F = mean_s Z_s' d[R_s theta]/dp` and the
/// per-group rate influence terms.
pub struct RateCorrection<'a> {
    pub f: DMatrix<f64>,
    pub tau: &'a [DVector<f64>],
}

/// Group-clustered sandwich `Sigma0 [mean_s kappa_s kappa_s'] Sigma0' / S`
/// with `kappa_s = Z_s' v_s - F tau_s` and `Sigma0 = (A'B^-1 A)^-1 A'B^-1`
/// built from group-averaged cross products.
pub fn clustered_vcov(
    fit: &TslsResult,
    blocks: &[GroupBlock],
    correction: Option<&RateCorrection<'_>>,
) -> Result<DMatrix<f64>> {
    let s = blocks.len();
    if s == 0 {
        return Err(Error::Invalid("no groups".into()));
    }
    let sf = s as f64;
    let a = &fit.a / sf;
    let b = &fit.b / sf;
    let b_inv_a = solve_square(&b, &a, "Z'Z")?;
    let m = a.transpose() * &b_inv_a;
    // Sigma0 = M^-1 (B^-1 A)'
    let sigma0 = solve_square(&m, &b_inv_a.transpose(), "A'B^-1A")?;
    let kappas: Vec<DVector<f64>> = blocks
        .iter()
        .enumerate()
        .map(|(i, blk)| {
            let v = &blk.y - &blk.r * &fit.theta;
            let mut k = blk.z.transpose() * v;
            if let Some(c) = correction {
                k -= &c.f * &c.tau[i];
            }
            k
        })
        .collect();
    let l = a.nrows();
    let mut omega = DMatrix::zeros(l, l);
    for k in &kappas {
        omega += k * k.transpose();
    }
    omega /= sf;
    let v = &sigma0 * omega * sigma0.transpose() / sf;
    Ok((&v + v.transpose()) * 0.5)
}

fn correction_matrix(blocks: &[GroupBlock], lambda: f64) -> Option<DMatrix<f64>> {
    let first = blocks.first()?.dpeer.as_ref()?;
    let (l, p) = (blocks[0].z.ncols(), first.ncols());
    let mut f = DMatrix::zeros(l, p);
    for b in blocks {
        let d = b.dpeer.as_ref()?;
        f += b.z.transpose() * d * lambda;
    }
    Some(f / blocks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_groups: usize,
    pub n_obs: usize,
    pub n_instruments: usize,
    /// Smallest singular value of `A = mean_s Z_s'R_s`.
    pub min_singular_a: f64,
    /// Smallest singular value of `B = mean_s Z_s'Z_s`.
    pub min_singular_b: f64,
    pub rcond_a: f64,
    pub rcond_b: f64,
    /// The clustered covariance has rank at most the number of groups.
    pub too_few_groups: bool,
    pub group_residual_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerEffectsFit {
    pub label: String,
    pub spec: EstimatorSpec,
    pub names: Vec<String>,
    /// Coefficients in the order of `names`.
    pub coefficients: Vec<f64>,
    pub theta: Option<Theta>,
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub first_stage_corrected: bool,
    pub diagnostics: FitDiagnostics,
}

impl PeerEffectsFit {
    pub fn lambda(&self) -> Option<f64> {
        self.theta.as_ref().map(|t| t.lambda)
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let k = self.vcov.len();
        DMatrix::from_fn(k, k, |i, j| self.vcov[i][j])
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.se[i])
    }
}

/// Stacked adjusted 2SLS over both measures.
pub fn s2sls(ds: &Dataset, rates: &RatesEstimate, fixed_effects: FixedEffectsMode) -> Result<PeerEffectsFit> {
    let spec = EstimatorSpec::new(Variant::S2sls)
        .fixed_effects(fixed_effects)
        .with_rates(rates.clone());
    fit(ds, &spec)
}

/// Design, point estimate and clustered covariance.
pub fn fit(ds: &Dataset, spec: &EstimatorSpec) -> Result<PeerEffectsFit> {
    let design = build_design(ds, spec)?;
    let tau = rate_influence(ds, spec)?;
    let (a, b, c) = design.cross_products();
    let est = tsls_from_moments(a, b, c)?;
    let lambda = if design.has_peer { est.theta[0] } else { 0.0 };
    let f = tau.as_ref().and_then(|_| correction_matrix(&design.blocks, lambda));
    let correction = match (&f, &tau) {
        (Some(f), Some(tau)) => Some(RateCorrection { f: f.clone(), tau }),
        _ => None,
    };
    let vcov = clustered_vcov(&est, &design.blocks, correction.as_ref())?;
    let s = design.blocks.len() as f64;
    let sv_a = singular_values(&(&est.a / s));
    let sv_b = singular_values(&(&est.b / s));
    let group_residual_norms = design
        .blocks
        .iter()
        .map(|blk| (&blk.y - &blk.r * &est.theta).norm())
        .collect();
    let n_instruments = est.b.nrows();
    let diagnostics = FitDiagnostics {
        n_groups: design.blocks.len(),
        n_obs: design.blocks.iter().map(|b| b.y.len()).sum(),
        n_instruments,
        min_singular_a: sv_a.last().copied().unwrap_or(0.0),
        min_singular_b: sv_b.last().copied().unwrap_or(0.0),
        rcond_a: rcond(&est.a),
        rcond_b: rcond(&est.b),
        too_few_groups: design.blocks.len() <= n_instruments,
        group_residual_norms,
    };
    let se = (0..vcov.nrows()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    let theta = design.has_peer.then(|| Theta::from_vector(&est.theta));
    let mut spec_echo = spec.clone();
    spec_echo.rates = None;
    spec_echo.instruments = spec.resolved_instruments(ds.n_measures());
    Ok(PeerEffectsFit {
        label: spec.label(ds.n_measures()),
        spec: spec_echo,
        names: design.names.clone(),
        coefficients: est.theta.iter().copied().collect(),
        theta,
        vcov: vcov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        se,
        first_stage_corrected: correction.is_some(),
        diagnostics,
    })
}
