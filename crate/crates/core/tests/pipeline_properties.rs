mod common;

use mixture_mte::aggregates::{cate, prte, wald_late, BinaryIvDataset, CounterfactualPolicy, LateContrast};
use mixture_mte::data::{load_csv_reader, Dataset};
use mixture_mte::dgp::{simulate, DgpConfig};
use mixture_mte::inference::{build_inference_matrices, mte_ci, mte_se};
use mixture_mte::mc::{mc_run, McSettings, StageVariant};
use mixture_mte::mixture::EmConfig;
use mixture_mte::numeric::{bspline_basis, BasisSpec, SolverConfig};
use mixture_mte::series::{build_regressors, fit_outcome_stage, mte, mtr, Arm, OutcomeStageFit, StageInput};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn fitted(n: usize, seed: u64, solver: &SolverConfig) -> (Dataset, StageInput, OutcomeStageFit) {
    let sim = simulate(&DgpConfig { n, ..DgpConfig::default() }, seed).unwrap();
    let data = sim.dataset().unwrap();
    let input = sim.infeasible_input().unwrap();
    let fit = fit_outcome_stage(&data, &input, &BasisSpec::default(), solver).unwrap();
    (data, input, fit)
}

#[test]
fn cate_equals_spline_antiderivative() {
    for inner in [0, 1, 3] {
        let sim = simulate(&DgpConfig { n: 3000, ..DgpConfig::default() }, 21).unwrap();
        let data = sim.dataset().unwrap();
        let basis = BasisSpec::new(3, inner).unwrap();
        let fit = fit_outcome_stage(&data, &sim.infeasible_input().unwrap(), &basis, &SolverConfig::default()).unwrap();
        let b0 = bspline_basis(0.0, &basis).unwrap();
        let b1 = bspline_basis(1.0, &basis).unwrap();
        for j in 0..2 {
            for x in [[1.0, 0.5], [1.0, -1.2]] {
                let lin: f64 = (0..2).map(|k| x[k] * (fit.beta(Arm::Treated, j)[k] - fit.beta(Arm::Untreated, j)[k])).sum();
                let ends: f64 = (0..basis.dim())
                    .map(|k| (b1[k] - b0[k]) * (fit.alpha(Arm::Treated, j)[k] + fit.alpha(Arm::Untreated, j)[k]))
                    .sum();
                let c = cate(&fit, j, &x).unwrap();
                assert!((c - (lin + ends)).abs() < 1e-10, "inner {inner} group {j}: {c} vs {}", lin + ends);
            }
        }
    }
}

#[test]
fn mte_is_difference_of_mtrs() {
    let (_, _, fit) = fitted(2000, 3, &SolverConfig::default());
    for j in 0..2 {
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            let x = [1.0, 0.3];
            let d = mtr(&fit, j, Arm::Treated, &x, p).unwrap() - mtr(&fit, j, Arm::Untreated, &x, p).unwrap();
            assert_eq!(mte(&fit, j, &x, p).unwrap(), d);
        }
    }
}

#[test]
fn unpenalized_fit_is_finite_and_reproducible() {
    let (data, input, a) = fitted(1500, 4, &SolverConfig::min_norm());
    let (_, _, b) = fitted(1500, 4, &SolverConfig::min_norm());
    assert!(a.rank1 < a.n_coef());
    for arm in Arm::BOTH {
        assert!(a.theta(arm).iter().all(|t| t.is_finite()));
        let r = build_regressors(&data, &input, &BasisSpec::default(), arm).unwrap();
        let fa = &r * DVector::from_column_slice(a.theta(arm));
        let fb = &r * DVector::from_column_slice(b.theta(arm));
        assert!((fa - fb).amax() < 1e-10);
    }
}

#[test]
fn no_change_policy_is_neutral_under_the_model() {
    let (data, input, fit) = fitted(4000, 8, &SolverConfig::default());
    let policy = CounterfactualPolicy::deterministic(&input.propensities).unwrap();
    let out = prte(&fit, &data, &input, &policy).unwrap();
    assert!(out.prte_model.abs() < 1e-12);
    // the literal contrast differs only by the fitted factual mean
    assert!((out.prte - (out.factual_mean - out.observed_mean)).abs() < 1e-12);
    assert!(out.se > 0.0);
}

#[test]
fn covariance_matrices_are_symmetric_psd() {
    let (data, input, fit) = fitted(3000, 12, &SolverConfig::default());
    let mats = build_inference_matrices(&data, &input, &fit).unwrap();
    for m in [&mats.psi1, &mats.psi0, &mats.sigma1, &mats.sigma0] {
        assert!((m - m.transpose()).amax() < 1e-12);
        let floor = -1e-10 * m.trace();
        assert!(m.clone().symmetric_eigen().eigenvalues.iter().all(|e| *e >= floor));
    }
    let mut max_cov: f64 = 0.0;
    for i in 1..10 {
        let s = mte_se(&mats, &fit, 1, i as f64 / 10.0).unwrap();
        assert!(s.se > 0.0);
        max_cov = max_cov.max(s.cov.abs());
    }
    assert!(max_cov > 1e-3, "{max_cov}");
}

#[test]
fn duplicated_data_shrinks_se_by_root_two() {
    let sim = simulate(&DgpConfig { n: 1500, ..DgpConfig::default() }, 13).unwrap();
    let data = sim.dataset().unwrap();
    let input = sim.infeasible_input().unwrap();
    let doubled = data.repeat_rows(2);
    let p2 = DMatrix::from_fn(3000, 2, |i, j| input.propensities[(i / 2, j)]);
    let input2 = StageInput::new(input.pi.clone(), p2, input.source).unwrap();
    let basis = BasisSpec::default();
    let solver = SolverConfig::min_norm();
    let f1 = fit_outcome_stage(&data, &input, &basis, &solver).unwrap();
    let f2 = fit_outcome_stage(&doubled, &input2, &basis, &solver).unwrap();
    let m1 = build_inference_matrices(&data, &input, &f1).unwrap();
    let m2 = build_inference_matrices(&doubled, &input2, &f2).unwrap();
    for j in 0..2 {
        for p in [0.2, 0.5, 0.8] {
            let a = mte_se(&m1, &f1, j, p).unwrap().se;
            let b = mte_se(&m2, &f2, j, p).unwrap().se;
            assert!((b / a - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8, "{}", b / a);
        }
    }
}

#[test]
fn bands_are_symmetric() {
    let (data, input, fit) = fitted(2000, 14, &SolverConfig::default());
    let mats = build_inference_matrices(&data, &input, &fit).unwrap();
    let curve = mte_ci(&fit, &mats, 0, &[1.0, 0.5], &[0.1, 0.5, 0.9], 0.95).unwrap();
    for pt in &curve.points {
        let (lo, hi, se) = (pt.lo.unwrap(), pt.hi.unwrap(), pt.se.unwrap());
        assert!(((pt.mte - lo) - (hi - pt.mte)).abs() <= 4.0 * f64::EPSILON * (pt.mte.abs() + hi.abs()));
        assert!(se > 0.0);
    }
}

#[test]
fn monte_carlo_cells_and_thread_independence() {
    let config = DgpConfig { n: 600, ..DgpConfig::default() };
    let settings = McSettings {
        replications: 6,
        variants: vec![StageVariant { inner_knots: 1, ridge: true }, StageVariant { inner_knots: 0, ridge: false }],
        em: EmConfig { n_starts: 2, ..EmConfig::default() },
        ..McSettings::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| mc_run(&config, &settings, 77).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    assert_eq!(a.cells.len(), 4);
    for (r, b) in a.ml.rmse.iter().zip(&a.ml.bias) {
        assert!(*r >= b.abs());
    }
    for cell in &a.cells {
        for (r, b) in cell.rmse.iter().zip(&cell.bias) {
            assert!(*r >= b.abs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_is_bitwise_deterministic(seed in proptest::num::u64::ANY, n in 1usize..300, binary in proptest::bool::ANY) {
        let cfg = if binary { DgpConfig { n, ..DgpConfig::binary_iv() } } else { DgpConfig { n, ..DgpConfig::default() } };
        let a = simulate(&cfg, seed).unwrap();
        let b = simulate(&cfg, seed).unwrap();
        let bits = |v: &DVector<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.y), bits(&b.y));
        prop_assert_eq!(a, b.clone());
        // bookkeeping
        for i in 0..n {
            let s = b.s[i];
            prop_assert_eq!(b.d[i], f64::from(u8::from(b.p[(i, s)] >= b.v[(i, s)])));
            prop_assert_eq!(b.y[i], if b.d[i] == 1.0 { b.y1[i] } else { b.y0[i] });
        }
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000, n in 20usize..80) {
        let sim = simulate(&DgpConfig { n, ..DgpConfig::default() }, seed).unwrap();
        let Ok(data) = sim.dataset() else { return Ok(()); };
        let mut buf = Vec::new();
        data.write_csv(&mut buf, None).unwrap();
        let back = load_csv_reader(buf.as_slice(), data.groups(), data.roles()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn wald_is_shift_invariant(seed in 0u64..1000, c in -50.0f64..50.0) {
        let sim = simulate(&DgpConfig { n: 2000, ..DgpConfig::binary_iv() }, seed).unwrap();
        let iv = sim.binary_iv().unwrap();
        let shifted = BinaryIvDataset::new(iv.y().add_scalar(c), iv.d().clone(), iv.z().clone()).unwrap();
        for contrast in [LateContrast::AllOnes, LateContrast::Unit(0), LateContrast::Unit(1)] {
            let (Ok(a), Ok(b)) = (wald_late(&iv, contrast), wald_late(&shifted, contrast)) else { continue };
            prop_assert!((a.estimate - b.estimate).abs() < 1e-9 * (1.0 + a.estimate.abs()));
        }
    }
}
