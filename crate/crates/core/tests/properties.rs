//! Property tests across the model, rate and estimator layers.

use nalgebra::{DMatrix, DVector};
use peerlink::estimators::{fit, EstimatorSpec, InstrumentSource, Variant};
use peerlink::linalg::singular_values;
use peerlink::model::{adjust_measure, reduced_form_solve, within_transform, Adjacency, Dataset};
use peerlink::rates::{closed_form, estimate_rates, psi_moments_single, psi_moments_two, RatesEstimate, RatesMode};
use peerlink::simulate::{simulate_dataset, MeasureChannelSpec, SimConfig};
use proptest::prelude::*;

fn adjacency(n: usize, bits: &[bool]) -> Adjacency {
    Adjacency::from_fn(n, |i, j| bits[(i * n + j) % bits.len()])
}

fn small_dataset(seed: u64, groups: usize, n: usize) -> Dataset {
    simulate_dataset(&SimConfig::baseline(groups, n, false, seed)).unwrap()
}

fn swap_measures(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for g in &mut out.groups {
        g.measures.swap(0, 1);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn zero_rates_leave_measure_unchanged(n in 3usize..9, bits in prop::collection::vec(any::<bool>(), 1..64)) {
        let h = adjacency(n, &bits);
        let w = adjust_measure(&h, 0.0, 0.0).unwrap();
        prop_assert_eq!(w.matrix, h.to_matrix());
    }

    #[test]
    fn within_columns_sum_to_zero(rows in 3usize..12, vals in prop::collection::vec(-1e3f64..1e3, 36)) {
        let m = DMatrix::from_fn(rows, 3, |i, j| vals[(i * 3 + j) % vals.len()]);
        let w = within_transform(&m);
        for c in w.column_iter() {
            let scale = m.abs().max().max(1.0);
            prop_assert!(c.sum().abs() <= 1e-12 * scale * rows as f64);
        }
    }

    #[test]
    fn reduced_form_inverts_the_structural_map(
        n in 3usize..15,
        bits in prop::collection::vec(any::<bool>(), 1..64),
        lambda in -0.2f64..0.2,
        x in prop::collection::vec(-5.0f64..5.0, 15),
    ) {
        // Row normalization keeps I - lambda G well conditioned.
        let g = adjacency(n, &bits).row_normalized();
        let x = DVector::from_fn(n, |i, _| x[i]);
        let rhs = &x - &g * &x * lambda;
        let back = reduced_form_solve(&g, lambda, &rhs).unwrap();
        prop_assert!((back - &x).norm() <= 1e-10 * x.norm().max(1.0));
    }

    #[test]
    fn measure_order_equivariance(seed in 0u64..1000) {
        let ds = small_dataset(seed, 20, 15);
        let a = estimate_rates(&ds, RatesMode::Two).unwrap();
        let b = estimate_rates(&swap_measures(&ds), RatesMode::Two).unwrap();
        for t in 0..2 {
            prop_assert!((a.p0[t] - b.p0[1 - t]).abs() < 1e-10);
            prop_assert!((a.p1[t] - b.p1[1 - t]).abs() < 1e-10);
        }
        prop_assert!((a.pi1 - b.pi1).abs() < 1e-10);
        prop_assert!((a.pi0 - b.pi0).abs() < 1e-10);
    }

    #[test]
    fn single_mode_ignores_transposition(seed in 0u64..1000) {
        let mut cfg = SimConfig::baseline(20, 15, false, seed);
        cfg.measures.truncate(1);
        let ds = simulate_dataset(&cfg).unwrap();
        let mut t = ds.clone();
        for g in &mut t.groups {
            g.measures[0] = g.measures[0].transpose();
        }
        let (pa, pb) = (psi_moments_single(&ds).unwrap(), psi_moments_single(&t).unwrap());
        // Transposing swaps the roles of H_ij and H_ji.
        prop_assert_eq!([pa.psi1[1], pa.psi1[0], pa.psi1[2]], pb.psi1);
        prop_assert_eq!([pa.psi0[1], pa.psi0[0], pa.psi0[2]], pb.psi0);
        // Small samples can fail the discriminant check; both sides must agree.
        let a = estimate_rates(&ds, RatesMode::Single).map(|e| e.params).map_err(|e| e.to_string());
        let b = estimate_rates(&t, RatesMode::Single).map(|e| e.params).map_err(|e| e.to_string());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn admissible_roots_have_expected_signs(
        pi1 in 0.15f64..0.6, pi0 in 0.01f64..0.1,
        p0a in 0.0f64..0.15, p1a in 0.0f64..0.3, p0b in 0.0f64..0.15, p1b in 0.0f64..0.3,
    ) {
        let q0 = [p0a, p0b, p0a + p0b - p0a * p0b];
        let q1 = [p1a, p1b, p1a * p1b];
        let psi = |pi: f64| [0, 1, 2].map(|t| (1.0 - q1[t]) * pi + q0[t] * (1.0 - pi));
        prop_assume!(((1.0 - p0b - p1b) * (pi1 - pi0)).abs() > 1e-3);
        let c = closed_form(psi(pi1), psi(pi0), RatesMode::Two).unwrap();
        if c.c2 > 0.0 && c.c0 > 0.0 {
            prop_assert!(c.xi > 0.0);
            prop_assert!(c.xi_rejected < 0.0);
        }
    }

    #[test]
    fn scale_equivariance(seed in 0u64..1000, c in prop_oneof![0.1f64..0.9, 1.5f64..20.0]) {
        let ds = small_dataset(seed, 25, 15);
        let mut scaled = ds.clone();
        for g in &mut scaled.groups {
            g.x.column_mut(1).scale_mut(c);
        }
        let spec = EstimatorSpec::new(Variant::Oracle).within();
        let a = fit(&ds, &spec).unwrap();
        let b = fit(&scaled, &spec).unwrap();
        prop_assert!((a.coefficients[0] - b.coefficients[0]).abs() <= 1e-10 * a.coefficients[0].abs().max(1.0));
        prop_assert!((a.coefficients[2] / c - b.coefficients[2]).abs() <= 1e-10 * a.coefficients[2].abs().max(1.0));
        prop_assert!((a.coefficients[1] - b.coefficients[1]).abs() <= 1e-10 * a.coefficients[1].abs().max(1.0));
    }

    #[test]
    fn node_relabelling_leaves_fit_unchanged(seed in 0u64..1000, shift in 1usize..14) {
        let ds = small_dataset(seed, 20, 15);
        let mut perm = ds.clone();
        for (g, orig) in perm.groups.iter_mut().zip(&ds.groups) {
            let n = g.n();
            let p = |i: usize| (i + shift) % n;
            g.y = DVector::from_fn(n, |i, _| orig.y[p(i)]);
            g.x = DMatrix::from_fn(n, 2, |i, j| orig.x[(p(i), j)]);
            let relabel = |h: &Adjacency| Adjacency::from_fn(n, |i, j| h.is_link(p(i), p(j)));
            g.measures = orig.measures.iter().map(relabel).collect();
            g.truth = orig.truth.as_ref().map(relabel);
        }
        let psi = psi_moments_two(&ds).unwrap();
        let psi_p = psi_moments_two(&perm).unwrap();
        for t in 0..3 {
            prop_assert!((psi.psi1[t] - psi_p.psi1[t]).abs() < 1e-14);
            prop_assert!((psi.psi0[t] - psi_p.psi0[t]).abs() < 1e-14);
        }
        let known = RatesEstimate::known([0.1, 0.08], [0.2, 0.16]);
        for spec in [
            EstimatorSpec::new(Variant::Adjusted).within().with_rates(known),
            EstimatorSpec::new(Variant::Naive),
        ] {
            let a = fit(&ds, &spec).unwrap();
            let b = fit(&perm, &spec).unwrap();
            for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn covariance_is_symmetric_psd_with_positive_ses(seed in 0u64..1000) {
        let ds = small_dataset(seed, 30, 15);
        let rates = RatesEstimate::known([0.1, 0.08], [0.2, 0.16]);
        for spec in [
            EstimatorSpec::new(Variant::Naive).within(),
            EstimatorSpec::new(Variant::Adjusted).within().with_rates(rates.clone()),
            EstimatorSpec::new(Variant::Oracle),
        ] {
            let f = fit(&ds, &spec).unwrap();
            let v = f.vcov_matrix();
            prop_assert!((&v - v.transpose()).abs().max() <= 1e-10 * v.abs().max());
            let eig = v.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.min() >= -1e-10 * v.abs().max());
            prop_assert!(f.se.iter().all(|s| *s > 0.0));
        }
    }
}

#[test]
fn six_observation_system_matches_direct_formula() {
    let y = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3, 1.7, -1.1]);
    let r = DMatrix::from_row_slice(6, 2, &[0.5, 1.0, 1.5, 0.0, -0.2, 1.0, 0.8, 2.0, 1.1, -1.0, 0.4, 0.5]);
    let z = DMatrix::from_row_slice(
        6,
        3,
        &[1.0, 0.2, 0.0, 0.5, 1.0, 1.0, -1.0, 0.3, 2.0, 0.0, 1.5, 0.7, 2.0, -0.4, 0.1, 1.0, 1.0, -1.0],
    );
    let got = peerlink::estimators::tsls(&y, &r, &z).unwrap().theta;
    let a = z.transpose() * &r;
    let b_inv = (z.transpose() * &z).try_inverse().unwrap();
    let want = (a.transpose() * &b_inv * &a).try_inverse().unwrap() * a.transpose() * b_inv * z.transpose() * &y;
    assert!((got - want).abs().max() < 1e-12);
}

#[test]
fn noiseless_identical_measures_stack_to_oracle() {
    let mut cfg = SimConfig::baseline(30, 12, false, 5);
    cfg.measures = vec![
        MeasureChannelSpec::Unsymmetrized { p0: 0.0, p1: 0.0 },
        MeasureChannelSpec::Unsymmetrized { p0: 0.0, p1: 0.0 },
    ];
    let ds = simulate_dataset(&cfg).unwrap();
    let zero = RatesEstimate::known([0.0, 0.0], [0.0, 0.0]);
    let stacked = peerlink::estimators::s2sls(&ds, &zero, peerlink::FixedEffectsMode::Within).unwrap();
    let oracle = fit(&ds, &EstimatorSpec::new(Variant::Oracle).within()).unwrap();
    for (a, b) in stacked.coefficients.iter().zip(&oracle.coefficients) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn oracle_equals_adjusted_with_zero_rates_bitwise() {
    let mut ds = small_dataset(17, 20, 12);
    for g in &mut ds.groups {
        let t = g.truth.clone().unwrap();
        g.measures = vec![t.clone(), t];
    }
    let zero = RatesEstimate::known([0.0, 0.0], [0.0, 0.0]);
    let adjusted = fit(
        &ds,
        &EstimatorSpec::new(Variant::Adjusted)
            .instruments(InstrumentSource::SameMeasure)
            .with_rates(zero),
    )
    .unwrap();
    let oracle = fit(&ds, &EstimatorSpec::new(Variant::Oracle)).unwrap();
    assert_eq!(adjusted.coefficients, oracle.coefficients);
    assert_eq!(adjusted.vcov, oracle.vcov);
}

#[test]
fn diagnostics_report_singular_values() {
    let ds = small_dataset(3, 40, 12);
    let f = fit(&ds, &EstimatorSpec::new(Variant::Oracle).within()).unwrap();
    assert!(f.diagnostics.min_singular_a > 0.0 && f.diagnostics.min_singular_b > 0.0);
    assert!(!f.diagnostics.too_few_groups);
    assert_eq!(f.diagnostics.group_residual_norms.len(), 40);
    assert_eq!(singular_values(&f.vcov_matrix()).len(), 3);
}
