//! Synthetic grouped network data.
//!
//! Per group the draws happen in a fixed order on the group's own keyed
//! stream: covariates, true links, structural errors, the fixed-effect
//! shock, then the misclassification flips of each measure in turn.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_rates, reduced_form_solve, Adjacency, Dataset, GroupSample};
use crate::rng::{stream, StreamRng};

/// How one noisy measure is produced from the true network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MeasureChannelSpec {
    /// Every ordered cell flips independently: 0 to 1 with `p0`, 1 to 0 with `p1`.
    Unsymmetrized { p0: f64, p1: f64 },
    /// Both members of an unordered pair report independently; the link is
    /// recorded in both directions if either reports it. A respondent misses
    /// an existing link with `phi1` and invents one with `phi0`.
    Symmetrized { phi0: f64, phi1: f64 },
}

impl MeasureChannelSpec {
    /// Cell-level rates `(p0, p1)` induced by the channel.
    pub fn rates(&self) -> (f64, f64) {
        match *self {
            Self::Unsymmetrized { p0, p1 } => (p0, p1),
            Self::Symmetrized { phi0, phi1 } => (1.0 - (1.0 - phi0) * (1.0 - phi0), phi1 * phi1),
        }
    }

    pub fn is_symmetrized(&self) -> bool {
        matches!(self, Self::Symmetrized { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Symmetrized { phi0, phi1 } = *self {
            if !(0.0..=1.0).contains(&phi0) || !(0.0..=1.0).contains(&phi1) {
                return Err(Error::Invalid(format!("respondent rates ({phi0}, {phi1}) outside [0,1]")));
            }
        }
        let (p0, p1) = self.rates();
        check_rates(p0, p1)
    }
}

/// Group fixed effect `alpha_s = scale * mean(X_s beta) + intercept + e_s`,
/// `e_s ~ N(0, noise_sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub scale: f64,
    pub intercept: f64,
    pub noise_sd: f64,
}

impl Default for FixedEffects {
    fn default() -> Self {
        Self {
            scale: 5.0,
            intercept: -1.5,
            noise_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSizes {
    Fixed(usize),
    PerGroup(Vec<usize>),
}

/// Parameters of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of groups S.
    pub groups: usize,
    pub group_size: GroupSizes,
    pub lambda: f64,
    /// Coefficients on (Bernoulli(0.5), N(0,1)) covariates.
    pub beta: Vec<f64>,
    /// Link probability for pairs sharing the first covariate.
    pub pi1: f64,
    /// Link probability for the other pairs.
    pub pi0: f64,
    pub measures: Vec<MeasureChannelSpec>,
    /// Draw unordered pairs and mirror them instead of ordered pairs.
    #[serde(default)]
    pub symmetric_network: bool,
    #[serde(default)]
    pub fixed_effects: Option<FixedEffects>,
    pub seed: u64,
}

impl SimConfig {
    /// The Monte Carlo design with two unsymmetrized measures; `large`
    /// doubles the misclassification rates.
    pub fn baseline(groups: usize, n: usize, large: bool, seed: u64) -> Self {
        let k = if large { 2.0 } else { 1.0 };
        Self {
            groups,
            group_size: GroupSizes::Fixed(n),
            lambda: 0.05,
            beta: vec![1.0, 2.0],
            pi1: 0.2,
            pi0: 0.1,
            measures: vec![
                MeasureChannelSpec::Unsymmetrized { p0: 0.10 * k, p1: 0.20 * k },
                MeasureChannelSpec::Unsymmetrized { p0: 0.08 * k, p1: 0.16 * k },
            ],
            symmetric_network: false,
            fixed_effects: Some(FixedEffects::default()),
            seed,
        }
    }

    pub fn size_of(&self, s: usize) -> usize {
        match &self.group_size {
            GroupSizes::Fixed(n) => *n,
            GroupSizes::PerGroup(v) => v[s],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Invalid("need at least one group".into()));
        }
        match &self.group_size {
            GroupSizes::Fixed(n) if *n < 3 => return Err(Error::Invalid(format!("group size {n} < 3"))),
            GroupSizes::PerGroup(v) if v.len() != self.groups => {
                return Err(Error::Invalid(format!("{} group sizes for {} groups", v.len(), self.groups)))
            }
            GroupSizes::PerGroup(v) if v.iter().any(|&n| n < 3) => {
                return Err(Error::Invalid("every group needs at least 3 members".into()))
            }
            _ => {}
        }
        if self.beta.len() != 2 {
            return Err(Error::Invalid(format!("beta has {} entries; the DGP has 2 covariates", self.beta.len())));
        }
        for p in [self.pi1, self.pi0] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("link probability {p} outside [0,1]")));
            }
        }
        if self.measures.is_empty() || self.measures.len() > 2 {
            return Err(Error::Invalid(format!("expected 1 or 2 measures, got {}", self.measures.len())));
        }
        for m in &self.measures {
            m.validate()?;
            if m.is_symmetrized() && !self.symmetric_network {
                return Err(Error::Invalid("symmetrized measures require a symmetric network".into()));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::Invalid("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// `n x 2` covariates: a Bernoulli(0.5) column and a standard normal column,
/// drawn row by row.
pub fn gen_covariates(n: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = if coin.sample(rng) { 1.0 } else { 0.0 };
        x[(i, 1)] = StandardNormal.sample(rng);
    }
    x
}

/// Dyadic Bernoulli links with probability `pi1` when the pair shares the
/// phi covariate and `pi0` otherwise.
pub fn gen_network(
    x: &DMatrix<f64>,
    pi1: f64,
    pi0: f64,
    phi_column: usize,
    symmetric: bool,
    rng: &mut StreamRng,
) -> Adjacency {
    let n = x.nrows();
    let mut rows = vec![vec![0u8; n]; n];
    for i in 0..n {
        let start = if symmetric { i + 1 } else { 0 };
        for j in start..n {
            if i == j {
                continue;
            }
            let p = if x[(i, phi_column)] == x[(j, phi_column)] { pi1 } else { pi0 };
            let u: f64 = rng.random();
            let link = u < p;
            rows[i][j] = link as u8;
            if symmetric {
                rows[j][i] = link as u8;
            }
        }
    }
    Adjacency::from_rows(&rows).expect("generated network is valid")
}

/// Passes the true network through a misclassification channel.
pub fn corrupt(g: &Adjacency, spec: &MeasureChannelSpec, rng: &mut StreamRng) -> Adjacency {
    let n = g.n();
    match *spec {
        MeasureChannelSpec::Unsymmetrized { p0, p1 } => Adjacency::from_fn(n, |i, j| {
            let u: f64 = rng.random();
            if g.is_link(i, j) {
                u >= p1
            } else {
                u < p0
            }
        }),
        MeasureChannelSpec::Symmetrized { phi0, phi1 } => {
            let mut rows = vec![vec![0u8; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let linked = g.is_link(i, j);
                    let mut report = || {
                        let u: f64 = rng.random();
                        if linked {
                            u >= phi1
                        } else {
                            u < phi0
                        }
                    };
                    let a = report();
                    let b = report();
                    let h = (a || b) as u8;
                    rows[i][j] = h;
                    rows[j][i] = h;
                }
            }
            Adjacency::from_rows(&rows).expect("symmetrized measure is valid")
        }
    }
}

fn simulate_group(cfg: &SimConfig, replication: u64, s: usize) -> Result<GroupSample> {
    let n = cfg.size_of(s);
    let mut rng = stream(cfg.seed, replication, s as u64);
    let x = gen_covariates(n, &mut rng);
    let g = gen_network(&x, cfg.pi1, cfg.pi0, 0, cfg.symmetric_network, &mut rng);
    let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let beta = DVector::from_column_slice(&cfg.beta);
    let xb = &x * &beta;
    let alpha = match cfg.fixed_effects {
        Some(fe) => {
            let shock: f64 = StandardNormal.sample(&mut rng);
            fe.scale * xb.mean() + fe.intercept + fe.noise_sd * shock
        }
        None => 0.0,
    };
    let rhs = xb.add_scalar(alpha) + eps;
    let y = reduced_form_solve(&g.to_matrix(), cfg.lambda, &rhs)?;
    let measures = cfg.measures.iter().map(|m| corrupt(&g, m, &mut rng)).collect();
    GroupSample::new(format!("g{}", s + 1), y, x, measures, Some(g))
}

/// One replication of the DGP; groups draw from streams keyed by
/// `(cfg.seed, replication, group)`.
pub fn simulate_replication(cfg: &SimConfig, replication: u64) -> Result<Dataset> {
    cfg.validate()?;
    let groups = (0..cfg.groups)
        .into_par_iter()
        .map(|s| simulate_group(cfg, replication, s))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        groups,
        vec!["x1".into(), "x2".into()],
        0,
        cfg.measures.iter().map(|m| m.is_symmetrized()).collect(),
    )
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    simulate_replication(cfg, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariate_moments() {
        let mut rng = stream(5, 0, 0);
        let x = gen_covariates(1_000_000, &mut rng);
        let m1 = x.column(0).mean();
        let c2 = x.column(1);
        let m2 = c2.mean();
        let v2 = c2.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / (c2.len() - 1) as f64;
        assert!((m1 - 0.5).abs() < 0.002, "{m1}");
        assert!((v2 - 1.0).abs() < 0.01, "{v2}");
        assert!(x.column(0).iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn covariates_deterministic() {
        let a = gen_covariates(20, &mut stream(9, 1, 2));
        let b = gen_covariates(20, &mut stream(9, 1, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn network_extremes() {
        let x = gen_covariates(12, &mut stream(1, 0, 0));
        let empty = gen_network(&x, 0.0, 0.0, 0, false, &mut stream(1, 0, 1));
        assert_eq!(empty.link_count(), 0);
        let full = gen_network(&x, 1.0, 1.0, 0, false, &mut stream(1, 0, 1));
        assert_eq!(full.link_count(), 12 * 11);
        let sym = gen_network(&x, 0.3, 0.3, 0, true, &mut stream(1, 0, 2));
        assert!(sym.is_symmetric());
    }

    #[test]
    fn network_same_phi_rate() {
        let mut hits = 0u64;
        let mut pairs = 0u64;
        for s in 0..200 {
            let mut rng = stream(3, 0, s);
            let x = gen_covariates(50, &mut rng);
            let g = gen_network(&x, 0.2, 0.1, 0, false, &mut rng);
            for i in 0..50 {
                for j in 0..50 {
                    if i != j && x[(i, 0)] == x[(j, 0)] {
                        pairs += 1;
                        hits += g.get(i, j) as u64;
                    }
                }
            }
        }
        let rate = hits as f64 / pairs as f64;
        let se = (0.2 * 0.8 / pairs as f64).sqrt();
        assert!((rate - 0.2).abs() < 3.0 * se, "{rate}");
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let x = gen_covariates(15, &mut stream(2, 0, 0));
        let g = gen_network(&x, 0.3, 0.1, 0, false, &mut stream(2, 0, 1));
        let h = corrupt(&g, &MeasureChannelSpec::Unsymmetrized { p0: 0.0, p1: 0.0 }, &mut stream(2, 0, 2));
        assert_eq!(h, g);
    }

    #[test]
    fn channel_marginals_and_independence() {
        let (p0, p1) = (0.1, 0.2);
        let spec = MeasureChannelSpec::Unsymmetrized { p0, p1 };
        let n = 40;
        let (mut ones, mut n1, mut zeros, mut n0) = (0u64, 0u64, 0u64, 0u64);
        // adjacent-cell flip pairs for the independence check
        let (mut f_a, mut f_b, mut f_ab, mut npairs) = (0.0, 0.0, 0.0, 0.0);
        for s in 0..700 {
            let mut rng = stream(4, 0, s);
            let x = gen_covariates(n, &mut rng);
            let g = gen_network(&x, 0.5, 0.4, 0, false, &mut rng);
            let h = corrupt(&g, &spec, &mut rng);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    if g.is_link(i, j) {
                        n1 += 1;
                        zeros += (h.get(i, j) == 0) as u64;
                    } else {
                        n0 += 1;
                        ones += h.get(i, j) as u64;
                    }
                }
            }
            for i in 0..n {
                let (j, k) = ((i + 1) % n, (i + 2) % n);
                let a = (h.get(i, j) != g.get(i, j)) as u8 as f64;
                let b = (h.get(i, k) != g.get(i, k)) as u8 as f64;
                // standardize by the cell's own flip probability
                let pa = if g.is_link(i, j) { p1 } else { p0 };
                let pb = if g.is_link(i, k) { p1 } else { p0 };
                f_a += a - pa;
                f_b += b - pb;
                f_ab += (a - pa) * (b - pb) / (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
                npairs += 1.0;
            }
        }
        assert!(n0 + n1 > 1_000_000);
        let r0 = ones as f64 / n0 as f64;
        let r1 = zeros as f64 / n1 as f64;
        assert!((r0 - p0).abs() < 3.0 * (p0 * (1.0 - p0) / n0 as f64).sqrt(), "{r0}");
        assert!((r1 - p1).abs() < 3.0 * (p1 * (1.0 - p1) / n1 as f64).sqrt(), "{r1}");
        let corr = f_ab / npairs;
        assert!(corr.abs() < 3.0 / npairs.sqrt(), "flip correlation {corr}");
        let _ = (f_a, f_b);
    }

    #[test]
    fn all_links_lose_p1() {
        let g = Adjacency::from_fn(60, |_, _| true);
        let spec = MeasureChannelSpec::Unsymmetrized { p0: 0.0, p1: 0.2 };
        let mut zeros = 0u64;
        let mut cells = 0u64;
        for s in 0..50 {
            let h = corrupt(&g, &spec, &mut stream(8, 0, s));
            cells += 60 * 59;
            zeros += (60 * 59 - h.link_count()) as u64;
        }
        let r = zeros as f64 / cells as f64;
        assert!((r - 0.2).abs() < 3.0 * (0.16 / cells as f64).sqrt(), "{r}");
    }

    #[test]
    fn symmetrized_channel_composes_respondent_rates() {
        let spec = MeasureChannelSpec::Symmetrized { phi0: 0.01, phi1: 0.3 };
        let g = Adjacency::from_fn(50, |_, _| true);
        let mut zeros = 0u64;
        let mut pairs = 0u64;
        for s in 0..200 {
            let h = corrupt(&g, &spec, &mut stream(6, 0, s));
            assert!(h.is_symmetric());
            pairs += 50 * 49 / 2;
            zeros += ((50 * 49 - h.link_count()) / 2) as u64;
        }
        let r = zeros as f64 / pairs as f64;
        assert!((r - 0.09).abs() < 3.0 * (0.09 * 0.91 / pairs as f64).sqrt(), "{r}");
        let (p0, p1) = spec.rates();
        assert!((p0 - (1.0 - 0.99f64 * 0.99)).abs() < 1e-15 && (p1 - 0.09).abs() < 1e-15);
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = SimConfig::baseline(5, 10, false, 77);
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_groups(), 5);
        assert!(a.has_truth());
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = SimConfig::baseline(12, 15, false, 5);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_dataset(&cfg).unwrap());
        let b = four.install(|| simulate_dataset(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lambda_collapses_to_regression() {
        let mut cfg = SimConfig::baseline(200, 20, false, 31);
        cfg.lambda = 0.0;
        cfg.fixed_effects = None;
        let ds = simulate_dataset(&cfg).unwrap();
        let mut xtx = DMatrix::<f64>::zeros(2, 2);
        let mut xty = DVector::<f64>::zeros(2);
        for g in &ds.groups {
            xtx += g.x.transpose() * &g.x;
            xty += g.x.transpose() * &g.y;
        }
        let b = xtx.clone().lu().solve(&xty).unwrap();
        let inv = xtx.try_inverse().unwrap();
        for k in 0..2 {
            let se = inv[(k, k)].sqrt();
            assert!((b[k] - cfg.beta[k]).abs() < 4.0 * se, "beta{k} = {}", b[k]);
        }
    }

    #[test]
    fn symmetrized_requires_symmetric_network() {
        let mut cfg = SimConfig::baseline(2, 5, false, 1);
        cfg.measures = vec![MeasureChannelSpec::Symmetrized { phi0: 0.05, phi1: 0.2 }];
        assert!(cfg.validate().is_err());
        cfg.symmetric_network = true;
        assert!(cfg.validate().is_ok());
    }
}
