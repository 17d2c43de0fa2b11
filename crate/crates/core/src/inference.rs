//! Plug-in sandwich standard errors for the group-wise MTE.
//!
//! With `a = S_{K,j}' grad b_K(p)` the variance of the MTE estimate is
//! `(s1^2 + 2 cov + s0^2) / n` where
//! `s_d^2 = a' Psi_d^- Sigma_d Psi_d^- a` and
//! `cov = a' Psi_0^- C Psi_1^- a`. The generalized inverse is the same one
//! the second stage solved with: truncated pseudo-inverse when unpenalized,
//! `(Psi + lambda I)^{-1}` under ridge.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{normal_quantile, PenalizedLsq};
use crate::series::{arm_response, build_regressors, Arm, MteCurve, OutcomeStageFit, StageInput};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug)]
pub struct InferenceMatrices {
    pub psi1: DMatrix<f64>,
    pub psi0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub residuals1: DVector<f64>,
    pub residuals0: DVector<f64>,
    /// Generalized inverses of `psi1` / `psi0` matching the solver.
    pub psi1_inv: DMatrix<f64>,
    pub psi0_inv: DMatrix<f64>,
    pub n: usize,
    /// Inner variance values below this are raised to it.
    pub variance_floor: f64,
    floor_hits: AtomicUsize,
}

impl Clone for InferenceMatrices {
    fn clone(&self) -> Self {
        Self {
            psi1: self.psi1.clone(),
            psi0: self.psi0.clone(),
            sigma1: self.sigma1.clone(),
            sigma0: self.sigma0.clone(),
            cross: self.cross.clone(),
            residuals1: self.residuals1.clone(),
            residuals0: self.residuals0.clone(),
            psi1_inv: self.psi1_inv.clone(),
            psi0_inv: self.psi0_inv.clone(),
            n: self.n,
            variance_floor: self.variance_floor,
            floor_hits: AtomicUsize::new(self.floor_hits()),
        }
    }
}

fn rows_scaled(r: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = r.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

/// Builds `Psi`, `Sigma`, `C` and the residuals for a fitted second stage.
pub fn build_inference_matrices(
    data: &Dataset,
    input: &StageInput,
    fit: &OutcomeStageFit,
) -> Result<InferenceMatrices> {
    if data.n() != fit.n_obs || input.n_groups() != fit.n_groups || data.dim_x() != fit.dim_x {
        return Err(Error::invalid("fit, stage input and data dimensions disagree"));
    }
    let n = data.n();
    let nf = n as f64;
    let mut parts = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let r = build_regressors(data, input, &fit.basis, arm)?;
        let theta = DVector::from_column_slice(fit.theta(arm));
        let resid = arm_response(data, arm) - &r * theta;
        let psi = r.tr_mul(&r) / nf;
        let scaled = rows_scaled(&r, &resid);
        let sigma = scaled.tr_mul(&scaled) / nf;
        let inv = PenalizedLsq::factor(&r, &fit.solver)?.normal_inverse();
        parts.push((scaled, resid, psi, sigma, inv));
    }
    let (s0, resid0, psi0, sigma0, psi0_inv) = parts.pop().expect("two arms");
    let (s1, resid1, psi1, sigma1, psi1_inv) = parts.pop().expect("two arms");
    let cross = s0.tr_mul(&s1) / nf;
    Ok(InferenceMatrices {
        psi1,
        psi0,
        sigma1,
        sigma0,
        cross,
        residuals1: resid1,
        residuals0: resid0,
        psi1_inv,
        psi0_inv,
        n,
        variance_floor: DEFAULT_VARIANCE_FLOOR,
        floor_hits: AtomicUsize::new(0),
    })
}

impl InferenceMatrices {
    /// How many standard-error evaluations hit the variance floor.
    pub fn floor_hits(&self) -> usize {
        self.floor_hits.load(Ordering::Relaxed)
    }

    /// Plain-text dump of every matrix, for debugging.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mats: [(&str, &DMatrix<f64>); 7] = [
            ("psi1", &self.psi1),
            ("psi0", &self.psi0),
            ("sigma1", &self.sigma1),
            ("sigma0", &self.sigma0),
            ("cross", &self.cross),
            ("psi1_inv", &self.psi1_inv),
            ("psi0_inv", &self.psi0_inv),
        ];
        for (name, m) in mats {
            let _ = writeln!(out, "# {name} {} {}", m.nrows(), m.ncols());
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.10e}")).collect();
                let _ = writeln!(out, "{}", cells.join(" "));
            }
        }
        out
    }
}

/// Components of one MTE standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MteSe {
    pub se: f64,
    pub sigma1_sq: f64,
    pub sigma0_sq: f64,
    pub cov: f64,
    /// `sigma1_sq + 2 cov + sigma0_sq` before flooring.
    pub raw_variance: f64,
    pub floored: bool,
}

/// Standard error of `MTE_j(x, p)`.
pub fn mte_se(mats: &InferenceMatrices, fit: &OutcomeStageFit, group: usize, p: f64) -> Result<MteSe> {
    if group >= fit.n_groups {
        return Err(Error::invalid(format!("group {group} out of range")));
    }
    let m = fit.n_coef();
    if mats.psi1.nrows() != m {
        return Err(Error::invalid("inference matrices do not match the fit"));
    }
    let db = fit.basis.derivative(p)?;
    let mut a = DVector::zeros(m);
    let off = fit.alpha_offset(group);
    for (k, v) in db.iter().enumerate() {
        a[off + k] = *v;
    }
    let u1 = &mats.psi1_inv * &a;
    let u0 = &mats.psi0_inv * &a;
    let sigma1_sq = u1.dot(&(&mats.sigma1 * &u1));
    let sigma0_sq = u0.dot(&(&mats.sigma0 * &u0));
    let cov = u0.dot(&(&mats.cross * &u1));
    let raw = sigma1_sq + 2.0 * cov + sigma0_sq;
    let floored = !(raw >= mats.variance_floor);
    let var = if floored {
        mats.floor_hits.fetch_add(1, Ordering::Relaxed);
        warn!("MTE variance {raw:.3e} at p = {p} raised to the floor {:.1e}", mats.variance_floor);
        mats.variance_floor.max(0.0)
    } else {
        raw
    };
    Ok(MteSe {
        se: (var / mats.n as f64).sqrt(),
        sigma1_sq,
        sigma0_sq,
        cov,
        raw_variance: raw,
        floored,
    })
}

/// MTE curve with pointwise normal confidence bands at `level`.
pub fn mte_ci(
    fit: &OutcomeStageFit,
    mats: &InferenceMatrices,
    group: usize,
    x: &[f64],
    grid: &[f64],
    level: f64,
) -> Result<MteCurve> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0)?;
    let mut curve = crate::series::mte_curve(fit, group, x, grid)?;
    for pt in curve.points.iter_mut() {
        let se = mte_se(mats, fit, group, pt.p)?.se;
        pt.se = Some(se);
        pt.lo = Some(pt.mte - z * se);
        pt.hi = Some(pt.mte + z * se);
    }
    Ok(curve)
}
