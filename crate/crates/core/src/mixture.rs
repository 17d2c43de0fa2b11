//! First stage: finite-mixture Probit treatment choice fitted by EM.
//!
//! Group `j` chooses treatment by `D = 1{Z_j' gamma_j >= eps_j}` with
//! standard normal `eps_j`, and an observation belongs to group `j` with
//! probability `pi_j`. The E-step computes posterior membership weights;
//! the M-step sets `pi` to their means and refits each `gamma_j` by a
//! weighted Probit Newton iteration with step halving.

use std::f64::consts::FRAC_1_SQRT_2;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::normal::{mills_ratio, normal_cdf, normal_pdf};

/// Component choice probabilities are clamped to `[CLAMP, 1 - CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-10;

/// Lower bound applied to `pi` after an M-step so it stays in the open simplex.
const PI_FLOOR: f64 = 1e-12;

pub const FIT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureProbitParams {
    pub gamma: Vec<DVector<f64>>,
    pub pi: Vec<f64>,
}

impl MixtureProbitParams {
    pub fn n_groups(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let s = self.pi.len();
        if s == 0 || self.gamma.len() != s || data.n_groups() != s {
            return Err(Error::invalid(format!(
                "parameters describe {} groups, data has {}",
                s,
                data.n_groups()
            )));
        }
        for (j, g) in self.gamma.iter().enumerate() {
            if g.len() != data.z(j).ncols() {
                return Err(Error::invalid(format!(
                    "gamma_{j} has length {}, Z_{j} has {} columns",
                    g.len(),
                    data.z(j).ncols()
                )));
            }
        }
        if self.pi.iter().any(|p| !(*p > 0.0 && *p < 1.0)) && s > 1 {
            return Err(Error::invalid("pi must lie in the open simplex"));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("pi sums to {total}, not 1")));
        }
        Ok(())
    }

    /// Number of free parameters (coefficients plus `S - 1` mixing weights).
    pub fn n_free(&self) -> usize {
        self.gamma.iter().map(|g| g.len()).sum::<usize>() + self.pi.len() - 1
    }
}

/// `n x S` matrix of choice indices `Z_j' gamma_j`.
fn choice_indices(params: &MixtureProbitParams, z_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if z_blocks.len() != params.gamma.len() {
        return Err(Error::invalid("number of instrument blocks does not match gamma"));
    }
    let n = z_blocks.first().map_or(0, |z| z.nrows());
    let mut idx = DMatrix::zeros(n, z_blocks.len());
    for (j, (z, g)) in z_blocks.iter().zip(&params.gamma).enumerate() {
        if z.ncols() != g.len() || z.nrows() != n {
            return Err(Error::invalid(format!("instrument block {j} has the wrong shape")));
        }
        let col = z * g;
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite choice index for observation {i}, group {j}"
            )));
        }
        idx.set_column(j, &col);
    }
    Ok(idx)
}

/// Propensities `Phi(Z_j' gamma_j)` clamped to `[1e-10, 1 - 1e-10]`.
pub fn propensities(params: &MixtureProbitParams, z_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    Ok(choice_indices(params, z_blocks)?.map(|t| normal_cdf(t).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)))
}

/// Component likelihoods `L_i(gamma | s = j)` and the number of clamp events.
pub fn component_likelihoods(
    params: &MixtureProbitParams,
    data: &Dataset,
) -> Result<(DMatrix<f64>, usize)> {
    let idx = choice_indices(params, data.z_blocks())?;
    let d = data.d();
    let mut clamps = 0usize;
    let lik = DMatrix::from_fn(idx.nrows(), idx.ncols(), |i, j| {
        let q = if d[i] == 1.0 { 1.0 } else { -1.0 };
        let raw = normal_cdf(q * idx[(i, j)]);
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
            clamps += 1;
        }
        raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    });
    Ok((lik, clamps))
}

struct Posterior {
    responsibilities: DMatrix<f64>,
    loglik: f64,
    clamps: usize,
}

fn posterior(params: &MixtureProbitParams, data: &Dataset) -> Result<Posterior> {
    let (lik, clamps) = component_likelihoods(params, data)?;
    let (n, s) = lik.shape();
    let mut resp = DMatrix::zeros(n, s);
    let mut loglik = 0.0;
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..s {
            let w = params.pi[j] * lik[(i, j)];
            resp[(i, j)] = w;
            total += w;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateResponsibilities(i));
        }
        for j in 0..s {
            resp[(i, j)] /= total;
        }
        loglik += total.ln();
    }
    Ok(Posterior {
        responsibilities: resp,
        loglik,
        clamps,
    })
}

/// Mixture log-likelihood `sum_i log sum_j pi_j L_i(gamma | s = j)`.
pub fn mixture_loglik(params: &MixtureProbitParams, data: &Dataset) -> Result<f64> {
    params.validate(data)?;
    Ok(posterior(params, data)?.loglik)
}

/// Posterior membership weights `w_ij`; rows lie in the simplex.
pub fn e_step(params: &MixtureProbitParams, data: &Dataset) -> Result<DMatrix<f64>> {
    params.validate(data)?;
    Ok(posterior(params, data)?.responsibilities)
}

/// Settings for the weighted Probit Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonSettings {
    /// Convergence threshold on the gradient norm divided by the total weight.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Gradient norm accepted when step halving can no longer make progress.
const GRAD_ACCEPT: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ProbitSolution {
    pub coef: DVector<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the iteration limit was hit or no further ascent step was
    /// found; `coef` is then the best iterate reached.
    pub converged: bool,
}

/// `log Phi(u)` without underflow.
fn log_cdf(u: f64) -> f64 {
    if u < -35.0 {
        normal_pdf(u).ln() - mills_ratio(u).ln()
    } else {
        (0.5 * libm::erfc(-u * FRAC_1_SQRT_2)).ln()
    }
}

fn weighted_objective(z: &DMatrix<f64>, q: &[f64], w: &DVector<f64>, coef: &DVector<f64>) -> f64 {
    let t = z * coef;
    t.iter()
        .zip(q)
        .zip(w.iter())
        .filter(|(_, wi)| **wi != 0.0)
        .map(|((ti, qi), wi)| wi * log_cdf(qi * ti))
        .sum()
}

/// Maximizes `sum_i w_i log Phi((2 D_i - 1) Z_i' g)` by Newton-Raphson with
/// step halving, starting at `init`.
pub fn weighted_probit(
    z: &DMatrix<f64>,
    d: &DVector<f64>,
    w: &DVector<f64>,
    init: &DVector<f64>,
    settings: &NewtonSettings,
) -> std::result::Result<ProbitSolution, String> {
    let (n, k) = z.shape();
    if d.len() != n || w.len() != n || init.len() != k {
        return Err("dimension mismatch".into());
    }
    let q: Vec<f64> = d.iter().map(|v| if *v == 1.0 { 1.0 } else { -1.0 }).collect();
    let mut coef = init.clone();
    let mut obj = weighted_objective(z, &q, w, &coef);
    // tolerances apply to the gradient of the weight-normalized objective
    let scale = w.sum().max(1.0);
    for it in 0..=settings.max_iter {
        let t = z * &coef;
        let mut grad = DVector::zeros(k);
        let mut neg_hess = DMatrix::zeros(k, k);
        for i in 0..n {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let lam = q[i] * mills_ratio(q[i] * t[i]);
            let curv = wi * lam * (lam + t[i]);
            let zi = z.row(i);
            for a in 0..k {
                grad[a] += wi * lam * zi[a];
                for b in 0..=a {
                    neg_hess[(a, b)] += curv * zi[a] * zi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                neg_hess[(b, a)] = neg_hess[(a, b)];
            }
        }
        let gnorm = grad.norm();
        if gnorm < settings.grad_tol * scale || it == settings.max_iter {
            return Ok(ProbitSolution {
                coef,
                loglik: obj,
                grad_norm: gnorm,
                iterations: it,
                converged: gnorm < settings.grad_tol * scale,
            });
        }
        let step = match neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // flat or indefinite curvature; fall back to a pseudo-inverse step
                let svd = neg_hess.svd(true, true);
                svd.solve(&grad, 1e-12 * svd.singular_values.max())
                    .map_err(|e| e.to_string())?
            }
        };
        // near the optimum the gain is below the objective's rounding error
        let slack = 64.0 * f64::EPSILON * (obj.abs() + 1.0);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &coef + &step * scale;
            let cand_obj = weighted_objective(z, &q, w, &cand);
            if cand_obj.is_finite() && cand_obj >= obj - slack {
                coef = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Ok(ProbitSolution {
                coef,
                loglik: obj,
                grad_norm: gnorm,
                iterations: it,
                converged: gnorm < GRAD_ACCEPT * scale,
            });
        }
    }
    unreachable!("the loop returns at the iteration limit")
}

#[derive(Debug, Clone)]
pub struct MStep {
    pub params: MixtureProbitParams,
    /// Mean responsibilities before clamping into the open simplex.
    pub raw_pi: Vec<f64>,
    /// Groups whose raw weight fell below the identification threshold.
    pub degenerate: Vec<usize>,
    /// Groups whose weighted Probit stopped before converging; their update
    /// still does not decrease the expected log-likelihood.
    pub unconverged: Vec<usize>,
}

/// Updates `pi` to mean responsibilities and refits each `gamma_j` by
/// weighted Probit, warm-started at `warm_start`.
pub fn m_step(
    responsibilities: &DMatrix<f64>,
    data: &Dataset,
    warm_start: &MixtureProbitParams,
) -> Result<MStep> {
    m_step_with(responsibilities, data, warm_start, &NewtonSettings::default(), 1e-4)
}

fn m_step_with(
    resp: &DMatrix<f64>,
    data: &Dataset,
    warm: &MixtureProbitParams,
    newton: &NewtonSettings,
    min_pi: f64,
) -> Result<MStep> {
    let (n, s) = resp.shape();
    if n != data.n() || s != data.n_groups() || warm.gamma.len() != s {
        return Err(Error::invalid("responsibilities do not match the data"));
    }
    if let Some(i) = (0..n).find(|&i| (resp.row(i).sum() - 1.0).abs() > 1e-8) {
        return Err(Error::invalid(format!(
            "responsibility row {i} does not sum to one"
        )));
    }
    let raw_pi: Vec<f64> = (0..s).map(|j| resp.column(j).sum() / n as f64).collect();
    let degenerate: Vec<usize> = (0..s).filter(|&j| raw_pi[j] < min_pi).collect();

    let mut gamma = Vec::with_capacity(s);
    let mut unconverged = Vec::new();
    for j in 0..s {
        let w = resp.column(j).into_owned();
        if w.sum() < 1e-8 {
            // nothing to fit; keep the warm start
            gamma.push(warm.gamma[j].clone());
            continue;
        }
        let sol = weighted_probit(data.z(j), data.d(), &w, &warm.gamma[j], newton)
            .map_err(|reason| Error::ProbitFailure { group: j, reason })?;
        if !sol.converged {
            unconverged.push(j);
        }
        gamma.push(sol.coef);
    }

    let mut pi: Vec<f64> = raw_pi.iter().map(|p| p.max(PI_FLOOR)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    Ok(MStep {
        params: MixtureProbitParams { gamma, pi },
        raw_pi,
        degenerate,
        unconverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub n_starts: usize,
    /// Standard deviation of the Gaussian perturbation applied to the pooled
    /// Probit start for starts `1..n_starts`.
    pub start_noise_sd: f64,
    /// Relative log-likelihood change that declares convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub newton: NewtonSettings,
    /// Components with `pi_j` below this at convergence are non-identified.
    pub min_pi: f64,
    pub seed: u64,
    /// Squared-extrapolation (SQUAREM) acceleration; every accepted iterate
    /// still increases the log-likelihood.
    pub accelerate: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_starts: 10,
            start_noise_sd: 0.5,
            tol: 1e-8,
            max_iter: 500,
            newton: NewtonSettings::default(),
            min_pi: 1e-4,
            seed: 0,
            accelerate: true,
        }
    }
}

/// Outcome of one EM start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MixtureProbitFit {
    pub params: MixtureProbitParams,
    /// `n x S` clamped propensities `Phi(Z_j' gamma_j)`.
    pub propensities: DMatrix<f64>,
    pub responsibilities: DMatrix<f64>,
    pub loglik: f64,
    /// Per-iteration log-likelihood of the winning start.
    pub trace: Vec<f64>,
    pub best_start: usize,
    pub starts: Vec<StartSummary>,
    pub n_starts_used: usize,
    pub converged: bool,
    pub iterations: usize,
    pub aic: f64,
    pub clamp_events: usize,
    /// False when some `pi_j` fell below `min_pi`.
    pub identified: bool,
    pub warnings: Vec<String>,
}

struct StartRun {
    params: MixtureProbitParams,
    post: Posterior,
    trace: Vec<f64>,
    converged: bool,
    partial_m_steps: usize,
}

fn run_start(
    data: &Dataset,
    init: MixtureProbitParams,
    cfg: &EmConfig,
) -> Result<StartRun> {
    let mut params = init;
    let mut post = posterior(&params, data)?;
    let mut trace = vec![post.loglik];
    let mut converged = false;
    let partial = std::cell::Cell::new(0usize);
    let em_map = |p: &MixtureProbitParams, post: &Posterior| -> Result<(MixtureProbitParams, Posterior)> {
        let step = m_step_with(&post.responsibilities, data, p, &cfg.newton, cfg.min_pi)?;
        if !step.unconverged.is_empty() {
            partial.set(partial.get() + 1);
        }
        let next = step.params;
        let next_post = posterior(&next, data)?;
        Ok((next, next_post))
    };
    for _ in 0..cfg.max_iter {
        let (p1, post1) = em_map(&params, &post)?;
        let (next, next_post) = if cfg.accelerate {
            let (p2, post2) = em_map(&p1, &post1)?;
            squarem_step(&params, &p1, &p2, post.loglik, data, &em_map)
                .filter(|cand| cand.1.loglik >= post.loglik)
                .unwrap_or((p2, post2))
        } else {
            (p1, post1)
        };
        let change = (next_post.loglik - post.loglik).abs() / post.loglik.abs().max(f64::MIN_POSITIVE);
        trace.push(next_post.loglik);
        params = next;
        post = next_post;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(StartRun {
        params,
        post,
        trace,
        converged,
        partial_m_steps: partial.get(),
    })
}

fn flatten(p: &MixtureProbitParams) -> Vec<f64> {
    p.gamma.iter().flat_map(|g| g.iter().copied()).chain(p.pi.iter().copied()).collect()
}

fn unflatten(v: &[f64], like: &MixtureProbitParams) -> MixtureProbitParams {
    let mut off = 0;
    let gamma = like
        .gamma
        .iter()
        .map(|g| {
            let out = DVector::from_column_slice(&v[off..off + g.len()]);
            off += g.len();
            out
        })
        .collect();
    MixtureProbitParams {
        gamma,
        pi: v[off..].to_vec(),
    }
}

/// Extrapolates from three successive EM iterates and applies one more EM
/// map to the result. `None` when the extrapolated point is unusable.
fn squarem_step<F>(
    p0: &MixtureProbitParams,
    p1: &MixtureProbitParams,
    p2: &MixtureProbitParams,
    base_loglik: f64,
    data: &Dataset,
    em_map: &F,
) -> Option<(MixtureProbitParams, Posterior)>
where
    F: Fn(&MixtureProbitParams, &Posterior) -> Result<(MixtureProbitParams, Posterior)>,
{
    let (t0, t1, t2) = (flatten(p0), flatten(p1), flatten(p2));
    let r: Vec<f64> = t1.iter().zip(&t0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = t2.iter().zip(&t1).zip(&r).map(|((a, b), c)| a - b - c).collect();
    let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(vn > 0.0) {
        return None;
    }
    // alpha = -1 reproduces p2, so only steps beyond it are extrapolations
    let alpha = (-rn / vn).min(-1.0);
    if alpha == -1.0 {
        return None;
    }
    let cand: Vec<f64> = t0
        .iter()
        .zip(&r)
        .zip(&v)
        .map(|((t, r), v)| t - 2.0 * alpha * r + alpha * alpha * v)
        .collect();
    let cand = unflatten(&cand, p0);
    if cand.pi.iter().any(|p| !(*p > PI_FLOOR && *p < 1.0)) || cand.gamma.iter().flatten().any(|g| !g.is_finite()) {
        return None;
    }
    let post = posterior(&cand, data).ok()?;
    if !(post.loglik.is_finite() && post.loglik >= base_loglik) {
        return None;
    }
    em_map(&cand, &post).ok()
}

/// Single-group Probit fit of `D` on each `Z_j`, used to seed EM.
fn pooled_starts(data: &Dataset, newton: &NewtonSettings) -> Result<Vec<DVector<f64>>> {
    let ones = DVector::from_element(data.n(), 1.0);
    (0..data.n_groups())
        .map(|j| {
            let k = data.z(j).ncols();
            let sol = weighted_probit(data.z(j), data.d(), &ones, &DVector::zeros(k), newton)
                .map_err(|reason| Error::ProbitFailure { group: j, reason })?;
            if !sol.converged {
                return Err(Error::ProbitFailure {
                    group: j,
                    reason: format!(
                        "pooled Probit did not converge (gradient norm {:.3e} after {} iterations)",
                        sol.grad_norm, sol.iterations
                    ),
                });
            }
            Ok(sol.coef)
        })
        .collect()
}

/// Initial parameters for start `k`; start 0 is `base` itself.
fn start_params(base: &MixtureProbitParams, cfg: &EmConfig, k: usize) -> MixtureProbitParams {
    let mut gamma: Vec<DVector<f64>> = base.gamma.clone();
    if k > 0 && cfg.start_noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let noise = Normal::new(0.0, cfg.start_noise_sd).expect("valid sd");
        for g in gamma.iter_mut() {
            for v in g.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    MixtureProbitParams {
        gamma,
        pi: base.pi.clone(),
    }
}

/// Maximum-likelihood fit of the mixture Probit by multi-start EM.
///
/// Every start is seeded from single-group Probit fits of `D` on each `Z_j`
/// with equal weights. Starts run in parallel; the winner is the highest
/// final log-likelihood, ties broken by the lower start index, so the result
/// does not depend on scheduling.
pub fn em_fit(data: &Dataset, cfg: &EmConfig) -> Result<MixtureProbitFit> {
    let s = data.n_groups();
    let base = MixtureProbitParams {
        gamma: pooled_starts(data, &cfg.newton)?,
        pi: vec![1.0 / s as f64; s],
    };
    em_fit_from(data, cfg, &base)
}

/// [`em_fit`] with start 0 at `init` and the remaining starts perturbed
/// around it.
pub fn em_fit_from(data: &Dataset, cfg: &EmConfig, init: &MixtureProbitParams) -> Result<MixtureProbitFit> {
    if cfg.n_starts == 0 {
        return Err(Error::invalid("EM needs at least one start"));
    }
    init.validate(data)?;
    let runs: Vec<Result<StartRun>> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|k| run_start(data, start_params(init, cfg, k), cfg))
        .collect();

    let starts: Vec<StartSummary> = runs
        .iter()
        .enumerate()
        .map(|(k, r)| match r {
            Ok(run) => StartSummary {
                start: k,
                loglik: Some(run.post.loglik),
                iterations: run.trace.len() - 1,
                converged: run.converged,
                error: None,
            },
            Err(e) => StartSummary {
                start: k,
                loglik: None,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(k, r)| r.as_ref().ok().map(|run| (k, run.post.loglik)))
        .fold(None::<(usize, f64)>, |acc, (k, ll)| match acc {
            Some((_, best_ll)) if best_ll >= ll => acc,
            _ => Some((k, ll)),
        });
    let Some((best_start, _)) = best else {
        let reasons = starts
            .iter()
            .map(|s| format!("start {}: {}", s.start, s.error.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllStartsFailed {
            n_starts: cfg.n_starts,
            reasons,
        });
    };
    let run = runs
        .into_iter()
        .nth(best_start)
        .expect("index in range")
        .expect("best start succeeded");

    let mut warnings = Vec::new();
    let mut params = run.params;
    let mut post = run.post;
    if let Some(order) = relabel_identical_blocks(data, &params) {
        let msg = "groups share identical instrument blocks; labels ordered by descending pi".to_string();
        warn!("{msg}");
        warnings.push(msg);
        params = MixtureProbitParams {
            gamma: order.iter().map(|&j| params.gamma[j].clone()).collect(),
            pi: order.iter().map(|&j| params.pi[j]).collect(),
        };
        post.responsibilities = post.responsibilities.select_columns(&order);
    }

    let identified = params.pi.iter().all(|p| *p >= cfg.min_pi);
    if !identified {
        let msg = format!("a component has pi below {:.1e}; fit is not identified", cfg.min_pi);
        warn!("{msg}");
        warnings.push(msg);
    }
    if run.partial_m_steps > 0 {
        warnings.push(format!(
            "{} M-steps stopped before the weighted Probit converged (coefficients may be diverging)",
            run.partial_m_steps
        ));
    }
    if !run.converged {
        warnings.push(format!("EM did not converge in {} iterations", cfg.max_iter));
    }
    let propensities = propensities(&params, data.z_blocks())?;
    let aic = 2.0 * params.n_free() as f64 - 2.0 * post.loglik;
    Ok(MixtureProbitFit {
        propensities,
        responsibilities: post.responsibilities,
        loglik: post.loglik,
        iterations: run.trace.len() - 1,
        trace: run.trace,
        best_start,
        n_starts_used: starts.iter().filter(|s| s.error.is_none()).count(),
        starts,
        converged: run.converged,
        aic,
        clamp_events: post.clamps,
        identified,
        warnings,
        params,
    })
}

/// When every group uses the same instrument block, labels are not pinned by
/// the data; returns the descending-`pi` order in that case.
fn relabel_identical_blocks(data: &Dataset, params: &MixtureProbitParams) -> Option<Vec<usize>> {
    let s = data.n_groups();
    if s < 2 {
        return None;
    }
    let first = &data.groups().groups[0];
    if data.groups().groups.iter().any(|g| g != first) {
        return None;
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| params.pi[b].total_cmp(&params.pi[a]).then(a.cmp(&b)));
    Some(order)
}

/// Propensities for new instrument blocks under a fitted model.
pub fn predict_propensity(fit: &MixtureProbitFit, z_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if !fit.converged {
        warn!("predicting propensities from a non-converged mixture fit");
    }
    propensities(&fit.params, z_blocks)
}

/// JSON form of a mixture fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFitArtifact {
    pub schema_version: u32,
    pub gamma: Vec<Vec<f64>>,
    pub gamma_names: Vec<Vec<String>>,
    pub pi: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub best_start: usize,
    pub n_starts_used: usize,
    pub starts: Vec<StartSummary>,
    pub clamp_events: usize,
    pub identified: bool,
    pub warnings: Vec<String>,
}

impl MixtureProbitFit {
    pub fn to_artifact(&self, data: &Dataset) -> MixtureFitArtifact {
        MixtureFitArtifact {
            schema_version: FIT_SCHEMA_VERSION,
            gamma: self.params.gamma.iter().map(|g| g.iter().copied().collect()).collect(),
            gamma_names: (0..data.n_groups()).map(|j| data.z_names(j)).collect(),
            pi: self.params.pi.clone(),
            loglik: self.loglik,
            aic: self.aic,
            converged: self.converged,
            iterations: self.iterations,
            best_start: self.best_start,
            n_starts_used: self.n_starts_used,
            starts: self.starts.clone(),
            clamp_events: self.clamp_events,
            identified: self.identified,
            warnings: self.warnings.clone(),
        }
    }
}

impl MixtureFitArtifact {
    pub fn params(&self) -> MixtureProbitParams {
        MixtureProbitParams {
            gamma: self.gamma.iter().map(|g| DVector::from_vec(g.clone())).collect(),
            pi: self.pi.clone(),
        }
    }
}
