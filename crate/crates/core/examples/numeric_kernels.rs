//! B-spline basis, quadrature, the normal distribution and the
//! ridge/min-norm solver on their own.

use mixture_mte::numeric::{
    bspline_basis, bspline_deriv, gauss_legendre_integrate, normal_cdf, normal_quantile, BasisSpec,
    PenalizedLsq, SolverConfig,
};
use nalgebra::{DMatrix, DVector};

fn main() -> mixture_mte::Result<()> {
    let spec = BasisSpec::new(3, 1)?;
    println!("order 3, one interior knot: K = {}, knots {:?}", spec.dim(), spec.knots());
    for p in [0.0, 0.25, 0.5, 0.9, 1.0] {
        let b = bspline_basis(p, &spec)?;
        let d = bspline_deriv(p, &spec)?;
        println!("p = {p:.2}  b = {b:.4?}  sum = {:.3}  b' = {d:.3?}", b.iter().sum::<f64>());
    }

    let v = gauss_legendre_integrate(|v| 1.0 + v * v - v, 0.0, 1.0, 3, &[0.5])?;
    println!("integral of 1 + v^2 - v over [0, 1] = {v:.12} (5/6 = {:.12})", 5.0 / 6.0);

    println!("Phi(1.959964) = {:.6}, Phi^-1(0.975) = {:.6}", normal_cdf(1.959964), normal_quantile(0.975)?);

    // two identical columns: rank 1, the min-norm solution splits the weight
    let a = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    let y = DVector::from_vec(vec![2.0, 4.0, 6.0, 8.0]);
    let f = PenalizedLsq::factor(&a, &SolverConfig::min_norm())?;
    println!("rank {} min-norm theta {:?}", f.rank(), f.solve(&y)?.as_slice());
    for lambda in [0.1, 1.0, 10.0] {
        let t = PenalizedLsq::factor(&a, &SolverConfig::ridge(lambda))?.solve(&y)?;
        println!("ridge lambda = {lambda:>4}: theta {:.4?}", t.as_slice());
    }
    Ok(())
}
