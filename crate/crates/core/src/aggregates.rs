//! Treatment-effect aggregates built on a fitted second stage: CATE, ATE,
//! PRTE under a counterfactual propensity policy, and Wald LATEs for
//! binary instruments.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_numeric_columns, Dataset};
use crate::error::{Error, Result};
use crate::numeric::GaussLegendre;
use crate::series::{mte, Arm, OutcomeStageFit, StageInput};

/// Smallest first-stage contrast a Wald ratio is formed with.
pub const MIN_FIRST_STAGE: f64 = 1e-12;

fn rule_for(fit: &OutcomeStageFit) -> Result<GaussLegendre> {
    GaussLegendre::new(fit.basis.order().max(2))
}

/// `CATE_j(x) = int_0^1 MTE_j(x, v) dv`, by Gauss-Legendre on each knot span.
pub fn cate(fit: &OutcomeStageFit, group: usize, x: &[f64]) -> Result<f64> {
    let rule = rule_for(fit)?;
    // surfaces group / covariate errors before integrating
    mte(fit, group, x, 0.5)?;
    let f = |v: f64| mte(fit, group, x, v).expect("validated arguments");
    rule.integrate_panels(&f, 0.0, 1.0, &fit.basis.interior_knots())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    /// `ATE_j`: the sample mean of `CATE_j(X_i)`.
    pub per_group: Vec<f64>,
    /// `sum_j pi_j ATE_j`.
    pub overall: f64,
}

pub fn ate(fit: &OutcomeStageFit, data: &Dataset) -> Result<AteSummary> {
    check_data(fit, data)?;
    let n = data.n() as f64;
    let xs = data.x();
    let mut per_group = Vec::with_capacity(fit.n_groups);
    for j in 0..fit.n_groups {
        let total: f64 = (0..data.n())
            .map(|i| {
                let x: Vec<f64> = xs.row(i).iter().copied().collect();
                cate(fit, j, &x)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        per_group.push(total / n);
    }
    let overall = per_group.iter().zip(&fit.pi).map(|(a, p)| a * p).sum();
    Ok(AteSummary { per_group, overall })
}

fn check_data(fit: &OutcomeStageFit, data: &Dataset) -> Result<()> {
    if data.dim_x() != fit.dim_x {
        return Err(Error::invalid(format!(
            "data has {} covariates, the fit {}",
            data.dim_x(),
            fit.dim_x
        )));
    }
    if data.n() == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(())
}

/// Counterfactual propensities `P*_{ij}` with `k` equally weighted draws per
/// observation and group.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPolicy {
    n: usize,
    s: usize,
    k: usize,
    /// Indexed `(i * s + j) * k + r`.
    values: Vec<f64>,
}

impl CounterfactualPolicy {
    pub fn new(n: usize, s: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || s == 0 || k == 0 {
            return Err(Error::invalid("policy needs at least one observation, group and draw"));
        }
        if values.len() != n * s * k {
            return Err(Error::invalid(format!(
                "policy has {} values, expected {n} x {s} x {k}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("policy propensity {v} outside [0, 1]")));
        }
        Ok(Self { n, s, k, values })
    }

    /// One deterministic propensity per observation and group (`n x S`).
    pub fn deterministic(p: &DMatrix<f64>) -> Result<Self> {
        let (n, s) = p.shape();
        let values = (0..n).flat_map(|i| (0..s).map(move |j| p[(i, j)])).collect();
        Self::new(n, s, 1, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_groups(&self) -> usize {
        self.s
    }

    pub fn draws_per_cell(&self) -> usize {
        self.k
    }

    pub fn draws(&self, obs: usize, group: usize) -> &[f64] {
        let o = (obs * self.s + group) * self.k;
        &self.values[o..o + self.k]
    }

    /// Reads columns `p1..pS`. Without an `obs` column there is one row per
    /// observation; with one, rows are grouped by the 0-based `obs` index and
    /// every observation must carry the same number of draws.
    pub fn read_csv<R: Read>(mut reader: R, n: usize, s: usize) -> Result<Self> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| Error::Data(format!("reading policy: {e}")))?;
        let header = csv::Reader::from_reader(text.as_bytes()).headers()?.clone();
        let has_obs = header.iter().any(|h| h.trim() == "obs");
        let names: Vec<String> = (1..=s).map(|j| format!("p{j}")).collect();
        let mut wanted: BTreeSet<String> = names.iter().cloned().collect();
        if has_obs {
            wanted.insert("obs".into());
        }
        let cols = read_numeric_columns(text.as_bytes(), &wanted)?;
        let rows = cols[&names[0]].len();
        let mut per_obs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for r in 0..rows {
            let i = if has_obs {
                let o = cols["obs"][r];
                if o.fract() != 0.0 || o < 0.0 || o >= n as f64 {
                    return Err(Error::DataCell {
                        row: r + 1,
                        column: "obs".into(),
                        message: format!("observation index {o} outside 0..{n}"),
                    });
                }
                o as usize
            } else {
                r
            };
            if i >= n {
                return Err(Error::Data(format!("policy has {rows} rows for {n} observations")));
            }
            per_obs[i].push(r);
        }
        let k = per_obs.first().map_or(0, Vec::len);
        if k == 0 || per_obs.iter().any(|v| v.len() != k) {
            return Err(Error::Data(
                "every observation needs the same positive number of policy draws".into(),
            ));
        }
        let mut values = Vec::with_capacity(n * s * k);
        for rows_i in &per_obs {
            for name in &names {
                values.extend(rows_i.iter().map(|&r| cols[name][r]));
            }
        }
        Self::new(n, s, k, values)
    }

    pub fn read_csv_path(path: &Path, n: usize, s: usize) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), n, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrteEstimate {
    /// `counterfactual_mean - observed_mean`.
    pub prte: f64,
    /// Standard error of the sample mean of `E[Y* | X_i] - Y_i`, ignoring
    /// estimation error in the fitted curves.
    pub se: f64,
    /// Sample mean of `E[Y* | X_i]` under the policy.
    pub counterfactual_mean: f64,
    /// Sample mean of `Y`.
    pub observed_mean: f64,
    /// The counterfactual formula evaluated at the factual propensities.
    pub factual_mean: f64,
    /// `counterfactual_mean - factual_mean`. Unlike `prte` this does not pick
    /// up the fitted levels `g1(0)` and `g0(1)`, which the model sets to zero
    /// but the series fit leaves free.
    pub prte_model: f64,
    pub se_model: f64,
}

/// `int_0^1 [Pr(P* >= v) m1(v) + Pr(P* < v) m0(v)] dv` for one observation and group.
fn policy_integral(
    fit: &OutcomeStageFit,
    rule: &GaussLegendre,
    group: usize,
    x: &[f64],
    draws: &[f64],
) -> Result<f64> {
    let lin1 = fit.linear_part(Arm::Treated, group, x)?;
    let lin0 = fit.linear_part(Arm::Untreated, group, x)?;
    let a1 = fit.alpha(Arm::Treated, group);
    let a0 = fit.alpha(Arm::Untreated, group);
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cuts: Vec<f64> = fit.basis.interior_knots();
    cuts.extend_from_slice(&sorted);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    let k = draws.len() as f64;
    let mut total = 0.0;
    let mut lo = 0.0;
    for &hi in &cuts {
        if hi > lo {
            // constant on (lo, hi): no draw lies strictly inside
            let upper = sorted.iter().filter(|&&p| p >= hi).count() as f64 / k;
            let f = |v: f64| {
                let db = fit.basis.derivative(v).expect("v within [0, 1]");
                let s1: f64 = db.iter().zip(a1).map(|(b, a)| b * a).sum();
                let s0: f64 = db.iter().zip(a0).map(|(b, a)| b * a).sum();
                upper * (lin1 + s1) + (1.0 - upper) * (lin0 - s0)
            };
            total += rule.integrate(&f, lo, hi);
        }
        lo = hi;
    }
    Ok(total)
}

fn policy_means(
    fit: &OutcomeStageFit,
    data: &Dataset,
    rule: &GaussLegendre,
    draws: impl Fn(usize, usize) -> Vec<f64> + Sync,
) -> Result<Vec<f64>> {
    let xs = data.x();
    (0..data.n())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = xs.row(i).iter().copied().collect();
            let mut e = 0.0;
            for j in 0..fit.n_groups {
                e += fit.pi[j] * policy_integral(fit, rule, j, &x, &draws(i, j))?;
            }
            Ok(e)
        })
        .collect()
}

/// Policy-relevant treatment effect of moving every observation's
/// propensities from `input.propensities` to `policy`.
pub fn prte(
    fit: &OutcomeStageFit,
    data: &Dataset,
    input: &StageInput,
    policy: &CounterfactualPolicy,
) -> Result<PrteEstimate> {
    check_data(fit, data)?;
    if policy.n() != data.n() || policy.n_groups() != fit.n_groups {
        return Err(Error::invalid(format!(
            "policy is {} x {}, data and fit need {} x {}",
            policy.n(),
            policy.n_groups(),
            data.n(),
            fit.n_groups
        )));
    }
    if input.propensities.shape() != (data.n(), fit.n_groups) {
        return Err(Error::invalid("factual propensities do not match the data"));
    }
    let rule = rule_for(fit)?;
    let ystar = policy_means(fit, data, &rule, |i, j| policy.draws(i, j).to_vec())?;
    let yfact = policy_means(fit, data, &rule, |i, j| vec![input.propensities[(i, j)]])?;
    let y = data.y();
    let (prte, se) = mean_and_se(ystar.iter().zip(y.iter()).map(|(a, b)| a - b));
    let (prte_model, se_model) = mean_and_se(ystar.iter().zip(&yfact).map(|(a, b)| a - b));
    let n = data.n() as f64;
    Ok(PrteEstimate {
        prte,
        se,
        counterfactual_mean: ystar.iter().sum::<f64>() / n,
        observed_mean: y.sum() / n,
        factual_mean: yfact.iter().sum::<f64>() / n,
        prte_model,
        se_model,
    })
}

fn mean_and_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|d| (d - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0) / n).sqrt())
}

/// Outcome, treatment and one binary instrument per group.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryIvDataset {
    y: DVector<f64>,
    d: DVector<f64>,
    z: DMatrix<f64>,
}

impl BinaryIvDataset {
    pub fn new(y: DVector<f64>, d: DVector<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if d.len() != n || z.nrows() != n {
            return Err(Error::invalid("y, d and z must have the same number of rows"));
        }
        if z.ncols() == 0 {
            return Err(Error::invalid("at least one instrument is required"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("outcome contains non-finite values"));
        }
        if d.iter().chain(z.iter()).any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("treatment and instruments must be 0/1"));
        }
        Ok(Self { y, d, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_groups(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
}

/// Which instrument cells are compared against the all-zero cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateContrast {
    /// Every instrument switched on: the pooled complier LATE.
    AllOnes,
    /// Only instrument `j` switched on: the group-`j` complier LATE.
    Unit(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateEstimate {
    pub contrast: LateContrast,
    pub estimate: f64,
    pub reduced_form: f64,
    pub first_stage: f64,
    pub n_on: usize,
    pub n_off: usize,
}

/// Wald ratio between the `contrast` cell and the all-zero cell.
pub fn wald_late(data: &BinaryIvDataset, contrast: LateContrast) -> Result<LateEstimate> {
    let s = data.n_groups();
    let target: Vec<f64> = match contrast {
        LateContrast::AllOnes => vec![1.0; s],
        LateContrast::Unit(j) => {
            if j >= s {
                return Err(Error::invalid(format!("instrument {j} out of range (S = {s})")));
            }
            (0..s).map(|k| if k == j { 1.0 } else { 0.0 }).collect()
        }
    };
    let zero = vec![0.0; s];
    let mut on = (0usize, 0.0, 0.0);
    let mut off = (0usize, 0.0, 0.0);
    for i in 0..data.n() {
        let row = data.z.row(i);
        let cell = if row.iter().eq(target.iter()) {
            &mut on
        } else if row.iter().eq(zero.iter()) {
            &mut off
        } else {
            continue;
        };
        cell.0 += 1;
        cell.1 += data.y[i];
        cell.2 += data.d[i];
    }
    let label = |t: &[f64]| t.iter().map(|v| if *v == 1.0 { '1' } else { '0' }).collect::<String>();
    if on.0 == 0 {
        return Err(Error::EmptyCell(label(&target)));
    }
    if off.0 == 0 {
        return Err(Error::EmptyCell(label(&zero)));
    }
    let (na, nb) = (on.0 as f64, off.0 as f64);
    let reduced_form = on.1 / na - off.1 / nb;
    let first_stage = on.2 / na - off.2 / nb;
    if first_stage.abs() < MIN_FIRST_STAGE {
        return Err(Error::ZeroFirstStage(on.2 / na));
    }
    Ok(LateEstimate {
        contrast,
        estimate: reduced_form / first_stage,
        reduced_form,
        first_stage,
        n_on: on.0,
        n_off: off.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateEntry {
    pub group: usize,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cate: Vec<CateEntry>,
    pub ate: AteSummary,
    pub prte: Option<PrteEstimate>,
    pub late: Vec<LateEstimate>,
}
