//! Minimum-norm and ridge least squares through a thin SVD of the design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge penalty weight on the `(1/n)`-normalized squared-error objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgePenalty {
    /// Plain generalized-inverse solution.
    None,
    /// A fixed weight `lambda`.
    Fixed(f64),
    /// `lambda = c / n`, tracking the sample size.
    PerObservation(f64),
}

impl RidgePenalty {
    /// Penalty weight for a problem with `n` rows.
    pub fn resolve(&self, n: usize) -> f64 {
        match *self {
            RidgePenalty::None => 0.0,
            RidgePenalty::Fixed(l) => l,
            RidgePenalty::PerObservation(c) => c / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub ridge: RidgePenalty,
    /// Relative singular-value cutoff. The effective cutoff is
    /// `sigma_max * max(pinv_rel_tol, max(n, m) * eps)`.
    pub pinv_rel_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            ridge: RidgePenalty::PerObservation(10.0),
            pinv_rel_tol: f64::EPSILON,
        }
    }
}

impl SolverConfig {
    pub fn min_norm() -> Self {
        Self {
            ridge: RidgePenalty::None,
            ..Self::default()
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self {
            ridge: RidgePenalty::Fixed(lambda),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambda_ok = match self.ridge {
            RidgePenalty::None => true,
            RidgePenalty::Fixed(l) | RidgePenalty::PerObservation(l) => l.is_finite() && l >= 0.0,
        };
        if !lambda_ok {
            return Err(Error::invalid("ridge penalty must be finite and nonnegative"));
        }
        if !(self.pinv_rel_tol > 0.0 && self.pinv_rel_tol < 1.0) {
            return Err(Error::invalid(format!(
                "pinv_rel_tol must lie in (0, 1), got {}",
                self.pinv_rel_tol
            )));
        }
        Ok(())
    }
}

/// Thin SVD `A = U diag(s) V'` through faer, whose bidiagonal SVD is
/// reliable on exactly rank-deficient input.
fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (n, m) = a.shape();
    let fa = faer::Mat::<f64>::from_fn(n, m, |i, j| a[(i, j)]);
    let svd = fa
        .thin_svd()
        .map_err(|e| Error::Solver(format!("SVD did not converge: {e:?}")))?;
    let k = n.min(m);
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let u = DMatrix::from_fn(n, k, |i, j| fu[(i, j)]);
    let s = DVector::from_fn(k, |i, _| fs[i]);
    let v = DMatrix::from_fn(m, k, |i, j| fv[(i, j)]);
    Ok((u, s, v))
}

/// SVD factorization of an `n x m` design, reusable across responses.
#[derive(Debug, Clone)]
pub struct PenalizedLsq {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    sigma: DVector<f64>,
    n: usize,
    m: usize,
    lambda: f64,
    rank: usize,
    cutoff: f64,
}

impl PenalizedLsq {
    pub fn factor(design: &DMatrix<f64>, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, m) = design.shape();
        if n == 0 || m == 0 {
            return Err(Error::invalid("design must have at least one row and column"));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design contains non-finite entries"));
        }
        let (u, sigma, v) = thin_svd(design)?;
        let recon = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
        let scale = design.norm().max(f64::MIN_POSITIVE);
        if (recon - design).norm() > 1e-10 * scale {
            return Err(Error::Solver("SVD does not reproduce the design".into()));
        }
        let smax = sigma.max();
        let rel = cfg.pinv_rel_tol.max(n.max(m) as f64 * f64::EPSILON);
        let cutoff = smax * rel;
        let rank = sigma.iter().filter(|s| **s > cutoff).count();
        Ok(Self {
            u,
            v,
            sigma,
            n,
            m,
            lambda: cfg.ridge.resolve(n),
            rank,
            cutoff,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Numerical rank of the design at the truncation cutoff.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.m
    }

    /// Per-singular-value filter factor applied to `u_k' y`.
    fn filter(&self, s: f64) -> f64 {
        if self.lambda > 0.0 {
            s / (s * s + self.n as f64 * self.lambda)
        } else if s > self.cutoff {
            1.0 / s
        } else {
            0.0
        }
    }

    pub fn solve(&self, response: &DVector<f64>) -> Result<DVector<f64>> {
        if response.len() != self.n {
            return Err(Error::invalid(format!(
                "response has length {}, design has {} rows",
                response.len(),
                self.n
            )));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("response contains non-finite entries"));
        }
        let uty = self.u.tr_mul(response);
        let scaled = DVector::from_iterator(
            uty.len(),
            uty.iter().zip(self.sigma.iter()).map(|(c, s)| c * self.filter(*s)),
        );
        Ok(&self.v * scaled)
    }

    /// Inverse of `A'A / n` matching the solver: the truncated pseudo-inverse
    /// when unpenalized, `(A'A / n + lambda I)^{-1}` otherwise.
    pub fn normal_inverse(&self) -> DMatrix<f64> {
        let nf = self.n as f64;
        let mut out = DMatrix::zeros(self.m, self.m);
        let mut proj = DMatrix::zeros(self.m, self.m);
        for (k, s) in self.sigma.iter().enumerate() {
            let vk = self.v.column(k);
            let outer = vk * vk.transpose();
            if self.lambda > 0.0 {
                out += &outer * (1.0 / (s * s / nf + self.lambda));
                proj += outer;
            } else if *s > self.cutoff {
                out += outer * (nf / (s * s));
            }
        }
        if self.lambda > 0.0 && self.sigma.len() < self.m {
            let complement = DMatrix::identity(self.m, self.m) - proj;
            out += complement / self.lambda;
        }
        out
    }
}

/// Solves `min (1/n)||y - A theta||^2 + lambda ||theta||^2`, or the
/// minimum-norm least-squares problem when `lambda = 0`.
pub fn solve_penalized_lsq(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    PenalizedLsq::factor(design, cfg)?.solve(response)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_rank_one_wide_design() {
        let a = DMatrix::from_fn(12, 2, |i, j| ((i as f64).cos() - 0.2) * [0.7, -1.3][j]);
        let y = DVector::from_fn(12, |i, _| (i as f64).sin());
        let f = PenalizedLsq::factor(&a, &SolverConfig::min_norm()).unwrap();
        assert_eq!(f.rank(), 1);
        let t = f.solve(&y).unwrap();
        assert!((a.transpose() * (&a * &t - &y)).norm() < 1e-12);
        let pinv = a.clone().pseudo_inverse(1e-10).unwrap() * &y;
        assert!((t - pinv).norm() < 1e-12);
    }

    #[test]
    fn identity_system() {
        let a = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let th = solve_penalized_lsq(&a, &y, &SolverConfig::min_norm()).unwrap();
        assert!((th - &y).norm() < 1e-14);
    }

    #[test]
    fn duplicated_columns_split_weight() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let f = PenalizedLsq::factor(&a, &SolverConfig::min_norm()).unwrap();
        assert_eq!(f.rank(), 1);
        let th = f.solve(&y).unwrap();
        assert!((th[0] - 1.0).abs() < 1e-12 && (th[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_ridge_closed_form() {
        let a = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let th = solve_penalized_lsq(&a, &y, &SolverConfig::ridge(0.5)).unwrap();
        assert!((th[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn per_observation_penalty_resolves() {
        assert_eq!(RidgePenalty::PerObservation(10.0).resolve(4000), 10.0 / 4000.0);
        assert_eq!(RidgePenalty::None.resolve(10), 0.0);
    }

    #[test]
    fn normal_inverse_full_rank() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0]);
        let f = PenalizedLsq::factor(&a, &SolverConfig::min_norm()).unwrap();
        let psi = a.tr_mul(&a) / 4.0;
        let inv = psi.clone().try_inverse().unwrap();
        assert!((f.normal_inverse() - inv).norm() < 1e-12);

        let f = PenalizedLsq::factor(&a, &SolverConfig::ridge(0.3)).unwrap();
        let inv = (psi + DMatrix::identity(2, 2) * 0.3).try_inverse().unwrap();
        assert!((f.normal_inverse() - inv).norm() < 1e-12);
    }

    #[test]
    fn wide_ridge_inverse() {
        // n < m: the null space of the design still gets 1/lambda
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let f = PenalizedLsq::factor(&a, &SolverConfig::ridge(0.2)).unwrap();
        let inv = (a.tr_mul(&a) + DMatrix::identity(3, 3) * 0.2)
            .try_inverse()
            .unwrap();
        assert!((f.normal_inverse() - inv).norm() < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        a[(0, 1)] = f64::NAN;
        assert!(solve_penalized_lsq(&a, &y, &SolverConfig::min_norm()).is_err());
        let a = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, f64::INFINITY]);
        assert!(solve_penalized_lsq(&a, &y, &SolverConfig::min_norm()).is_err());
        let bad = SolverConfig {
            pinv_rel_tol: 0.0,
            ..SolverConfig::min_norm()
        };
        assert!(bad.validate().is_err());
    }
}
