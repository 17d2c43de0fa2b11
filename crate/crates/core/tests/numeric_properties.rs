use mixture_mte::numeric::{
    bspline_basis, bspline_deriv, gauss_legendre_integrate, normal_cdf, normal_pdf, normal_quantile,
    BasisSpec, PenalizedLsq, SolverConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn specs() -> Vec<BasisSpec> {
    let mut out = Vec::new();
    for order in [2, 3, 4] {
        for inner in [0, 1, 2, 5] {
            out.push(BasisSpec::new(order, inner).unwrap());
        }
    }
    out
}

#[test]
fn partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for spec in specs() {
        let mut points: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        points.extend([0.0, 1.0, 0.5]);
        points.extend(spec.interior_knots());
        for p in points {
            let s: f64 = bspline_basis(p, &spec).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{spec:?} at {p}: {s}");
        }
    }
}

#[test]
fn derivative_matches_finite_differences() {
    let h = 1e-6;
    for spec in specs() {
        let knots = spec.interior_knots();
        for i in 1..=200 {
            let p = i as f64 / 201.0;
            // central differences are not valid across a kink of an order-2 basis
            if knots.iter().any(|t| (p - t).abs() < 2.0 * h) {
                continue;
            }
            let up = bspline_basis(p + h, &spec).unwrap();
            let dn = bspline_basis(p - h, &spec).unwrap();
            let d = bspline_deriv(p, &spec).unwrap();
            for k in 0..d.len() {
                let fd = (up[k] - dn[k]) / (2.0 * h);
                assert!((fd - d[k]).abs() < 1e-5, "{spec:?} p={p} k={k}: {fd} vs {}", d[k]);
            }
        }
    }
}

#[test]
fn normal_round_trip() {
    for i in -600..=600 {
        let x = i as f64 / 100.0;
        let back = normal_quantile(normal_cdf(x)).unwrap();
        // above ~5.5, Phi(x) is within a few ulps of 1 and x is only
        // recoverable to about eps / phi(x)
        let tol = if x > 0.0 { 1e-9_f64.max(4.0 * f64::EPSILON / normal_pdf(x)) } else { 1e-9 };
        assert!((back - x).abs() <= tol, "x = {x}: {back}");
    }
}

#[test]
fn quadrature_matches_antiderivative() {
    let v = gauss_legendre_integrate(|v| 1.0 + v * v - v, 0.0, 1.0, 2, &[]).unwrap();
    assert!((v - 5.0 / 6.0).abs() < 1e-12);
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minimum_norm_solution(seed in 0u64..10_000, rank in 1usize..4, extra in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let m = rank + extra;
        let a = random_matrix(&mut rng, n, rank) * random_matrix(&mut rng, rank, m);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let f = PenalizedLsq::factor(&a, &SolverConfig::min_norm()).unwrap();
        prop_assert_eq!(f.rank(), rank);
        let theta = f.solve(&y).unwrap();
        let svd = a.clone().svd(true, true);
        let v_t = svd.v_t.unwrap();
        // rows of V' past the rank span the null space
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|i, j| svd.singular_values[*j].total_cmp(&svd.singular_values[*i]));
        for &k in &order[rank..] {
            let w = v_t.row(k).transpose() * (rng.random::<f64>() * 4.0 - 2.0);
            prop_assert!((&a * &w).norm() < 1e-9);
            let other = &theta + &w;
            let grad_gap = (a.transpose() * (&a * &other - &y)).norm();
            prop_assert!(grad_gap < 1e-9, "gap {}", grad_gap);
            prop_assert!(theta.norm() <= other.norm() + 1e-12);
        }
    }

    #[test]
    fn ridge_shrinks(seed in 0u64..10_000, l1 in 0.0f64..2.0, dl in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 15, 4);
        let y = DVector::from_fn(15, |_, _| rng.random::<f64>() * 3.0);
        let t1 = PenalizedLsq::factor(&a, &SolverConfig::ridge(l1)).unwrap().solve(&y).unwrap();
        let t2 = PenalizedLsq::factor(&a, &SolverConfig::ridge(l1 + dl)).unwrap().solve(&y).unwrap();
        prop_assert!(t2.norm() <= t1.norm() * (1.0 + 1e-12));
    }
}
