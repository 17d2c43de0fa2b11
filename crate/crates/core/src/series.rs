//! Second stage: series regressions of `D*Y` and `(1-D)*Y` on stacked
//! regressors, and the MTR/MTE functions they imply.
//!
//! For arm 1 an observation's regressor row is
//! `(pi_1 P_1 x', ..., pi_S P_S x', pi_1 b_K(P_1)', ..., pi_S b_K(P_S)')`;
//! arm 0 swaps `P_j` for `1 - P_j` in the covariate blocks only. The
//! coefficient vector is laid out the same way, so group `j`'s covariate
//! block starts at `j * dim_x` and its spline block at
//! `S * dim_x + j * K`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixture::MixtureProbitFit;
use crate::numeric::{BasisSpec, PenalizedLsq, SolverConfig};

pub const OUTCOME_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSource {
    /// Estimated `(pi, P)` from the first stage.
    Feasible,
    /// True `(pi, P)`, available only in simulations.
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treated,
    Untreated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treated, Arm::Untreated];

    pub fn from_indicator(d: u8) -> Result<Arm> {
        match d {
            1 => Ok(Arm::Treated),
            0 => Ok(Arm::Untreated),
            _ => Err(Error::invalid(format!("arm must be 0 or 1, got {d}"))),
        }
    }
}

/// Membership probabilities and per-observation propensities fed to the
/// second stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    pub pi: Vec<f64>,
    /// `n x S`, entries in `(0, 1)`.
    pub propensities: DMatrix<f64>,
    pub source: StageSource,
}

impl StageInput {
    pub fn new(pi: Vec<f64>, propensities: DMatrix<f64>, source: StageSource) -> Result<Self> {
        if pi.is_empty() || propensities.ncols() != pi.len() {
            return Err(Error::invalid("propensity matrix needs one column per group"));
        }
        if pi.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("pi must lie in the simplex"));
        }
        if let Some(pos) = propensities.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::invalid(format!(
                "propensity outside (0, 1) at observation {}",
                pos % propensities.nrows()
            )));
        }
        Ok(Self {
            pi,
            propensities,
            source,
        })
    }

    /// Feasible input from a first-stage fit. Non-identified fits are
    /// refused unless `force` is set.
    pub fn from_mixture(fit: &MixtureProbitFit, force: bool) -> Result<Self> {
        if !fit.identified && !force {
            let (group, pi) = fit
                .params
                .pi
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least one group");
            return Err(Error::NonIdentified { group, pi });
        }
        Self::new(
            fit.params.pi.clone(),
            fit.propensities.clone(),
            StageSource::Feasible,
        )
    }

    pub fn n_groups(&self) -> usize {
        self.pi.len()
    }
}

/// Stacked regressor matrix `R_K^{(d)}` (`n x S (dim_x + K)`).
pub fn build_regressors(
    data: &Dataset,
    input: &StageInput,
    basis: &BasisSpec,
    arm: Arm,
) -> Result<DMatrix<f64>> {
    let n = data.n();
    let s = input.n_groups();
    if input.propensities.nrows() != n || s != data.n_groups() {
        return Err(Error::invalid("stage input does not match the data"));
    }
    let dx = data.dim_x();
    let k = basis.dim();
    let mut r = DMatrix::zeros(n, s * (dx + k));
    for i in 0..n {
        for j in 0..s {
            let p = input.propensities[(i, j)];
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!(
                    "propensity {p} outside (0, 1) at observation {i}, group {j}"
                )));
            }
            let pi = input.pi[j];
            let w = match arm {
                Arm::Treated => pi * p,
                Arm::Untreated => pi * (1.0 - p),
            };
            for c in 0..dx {
                r[(i, j * dx + c)] = w * data.x()[(i, c)];
            }
            let b = basis.evaluate(p)?;
            let off = s * dx + j * k;
            for (c, bv) in b.iter().enumerate() {
                r[(i, off + c)] = pi * bv;
            }
        }
    }
    Ok(r)
}

/// Regression response for an arm: `D*Y` or `(1-D)*Y`.
pub fn arm_response(data: &Dataset, arm: Arm) -> DVector<f64> {
    let d = data.d();
    DVector::from_iterator(
        data.n(),
        data.y().iter().zip(d.iter()).map(|(y, d)| match arm {
            Arm::Treated => d * y,
            Arm::Untreated => (1.0 - d) * y,
        }),
    )
}

/// Fitted second-stage coefficients for both arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStageFit {
    pub schema_version: u32,
    pub theta1: Vec<f64>,
    pub theta0: Vec<f64>,
    pub basis: BasisSpec,
    pub solver: SolverConfig,
    /// Ridge weight actually used (`solver.ridge` resolved at this `n`).
    pub lambda: f64,
    pub pi: Vec<f64>,
    pub source: StageSource,
    pub dim_x: usize,
    pub x_names: Vec<String>,
    pub n_groups: usize,
    pub n_obs: usize,
    pub rank1: usize,
    pub rank0: usize,
}

impl OutcomeStageFit {
    pub fn theta(&self, arm: Arm) -> &[f64] {
        match arm {
            Arm::Treated => &self.theta1,
            Arm::Untreated => &self.theta0,
        }
    }

    pub fn n_coef(&self) -> usize {
        self.n_groups * (self.dim_x + self.basis.dim())
    }

    /// Offset of `beta_j` in the coefficient vector.
    pub fn beta_offset(&self, group: usize) -> usize {
        group * self.dim_x
    }

    /// Offset of `alpha_j` in the coefficient vector.
    pub fn alpha_offset(&self, group: usize) -> usize {
        self.n_groups * self.dim_x + group * self.basis.dim()
    }

    pub fn beta(&self, arm: Arm, group: usize) -> &[f64] {
        let o = self.beta_offset(group);
        &self.theta(arm)[o..o + self.dim_x]
    }

    pub fn alpha(&self, arm: Arm, group: usize) -> &[f64] {
        let o = self.alpha_offset(group);
        &self.theta(arm)[o..o + self.basis.dim()]
    }

    fn check_group(&self, group: usize) -> Result<()> {
        if group >= self.n_groups {
            return Err(Error::invalid(format!(
                "group {group} out of range (S = {})",
                self.n_groups
            )));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim_x {
            return Err(Error::invalid(format!(
                "covariate point has length {}, expected {}",
                x.len(),
                self.dim_x
            )));
        }
        Ok(())
    }

    /// `g_j^{(d)}(p) = b_K(p)' alpha_j^{(d)}`.
    pub fn g(&self, arm: Arm, group: usize, p: f64) -> Result<f64> {
        self.check_group(group)?;
        let b = self.basis.evaluate(p)?;
        Ok(dot(&b, self.alpha(arm, group)))
    }

    /// `x' beta_j^{(d)}`.
    pub fn linear_part(&self, arm: Arm, group: usize, x: &[f64]) -> Result<f64> {
        self.check_group(group)?;
        self.check_x(x)?;
        Ok(dot(x, self.beta(arm, group)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves both arms' series regressions.
pub fn fit_outcome_stage(
    data: &Dataset,
    input: &StageInput,
    basis: &BasisSpec,
    solver: &SolverConfig,
) -> Result<OutcomeStageFit> {
    let s = input.n_groups();
    let n_coef = s * (data.dim_x() + basis.dim());
    if data.n() <= n_coef {
        return Err(Error::invalid(format!(
            "need more observations ({}) than second-stage coefficients ({n_coef})",
            data.n()
        )));
    }
    let mut thetas = Vec::with_capacity(2);
    let mut ranks = Vec::with_capacity(2);
    let mut lambda = 0.0;
    for arm in Arm::BOTH {
        let r = build_regressors(data, input, basis, arm)?;
        let f = PenalizedLsq::factor(&r, solver)?;
        let theta = f.solve(&arm_response(data, arm))?;
        lambda = f.lambda();
        ranks.push(f.rank());
        thetas.push(theta.iter().copied().collect::<Vec<_>>());
    }
    let theta0 = thetas.pop().expect("two arms");
    let theta1 = thetas.pop().expect("two arms");
    Ok(OutcomeStageFit {
        schema_version: OUTCOME_SCHEMA_VERSION,
        theta1,
        theta0,
        basis: *basis,
        solver: *solver,
        lambda,
        pi: input.pi.clone(),
        source: input.source,
        dim_x: data.dim_x(),
        x_names: data.x_names(),
        n_groups: s,
        n_obs: data.n(),
        rank1: ranks[0],
        rank0: ranks[1],
    })
}

/// Marginal treatment response: `x' beta_j^{(1)} + grad g_j^{(1)}(p)` for
/// the treated arm and `x' beta_j^{(0)} - grad g_j^{(0)}(p)` for the
/// untreated arm.
pub fn mtr(fit: &OutcomeStageFit, group: usize, arm: Arm, x: &[f64], p: f64) -> Result<f64> {
    let lin = fit.linear_part(arm, group, x)?;
    let db = fit.basis.derivative(p)?;
    let slope = dot(&db, fit.alpha(arm, group));
    Ok(match arm {
        Arm::Treated => lin + slope,
        Arm::Untreated => lin - slope,
    })
}

/// `MTE_j(x, p) = m_j^{(1)}(x, p) - m_j^{(0)}(x, p)`.
pub fn mte(fit: &OutcomeStageFit, group: usize, x: &[f64], p: f64) -> Result<f64> {
    Ok(mtr(fit, group, Arm::Treated, x, p)? - mtr(fit, group, Arm::Untreated, x, p)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtePoint {
    pub p: f64,
    pub mte: f64,
    pub se: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Evaluated at `p = 0` or `p = 1`, where the estimates are unreliable.
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MteCurve {
    pub group: usize,
    pub x: Vec<f64>,
    pub points: Vec<MtePoint>,
}

/// `0.01, 0.02, ..., 0.99`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// Pointwise MTE over `grid`; standard errors are attached by
/// [`crate::inference::mte_ci`].
pub fn mte_curve(fit: &OutcomeStageFit, group: usize, x: &[f64], grid: &[f64]) -> Result<MteCurve> {
    let points = grid
        .iter()
        .map(|&p| {
            let boundary = p == 0.0 || p == 1.0;
            if boundary {
                warn!("MTE evaluated at the boundary p = {p}");
            }
            Ok(MtePoint {
                p,
                mte: mte(fit, group, x, p)?,
                se: None,
                lo: None,
                hi: None,
                boundary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MteCurve {
        group,
        x: x.to_vec(),
        points,
    })
}
