//! Monte Carlo replication harness for the mixture design.
//!
//! Replication `r` draws its sample from stream `r` of the base seed and its
//! EM perturbations from a seed derived from `(base seed, r)`, so results
//! do not depend on how replications are scheduled across threads.

use std::io::Write;

use log::info;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::format_number;
use crate::dgp::{simulate_with, stream_rng, true_mte, DgpConfig};
use crate::error::{Error, Result};
use crate::inference::{build_inference_matrices, mte_se};
use crate::mixture::{em_fit, em_fit_from, EmConfig, MixtureProbitParams};
use crate::numeric::{normal_quantile, BasisSpec, RidgePenalty, SolverConfig};
use crate::series::{fit_outcome_stage, mte, StageInput, StageSource};

/// Where EM's first start sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmStart {
    /// Single-group Probit fits, as in [`em_fit`].
    Pooled,
    /// The design's true parameters (an oracle start for diagnostics).
    Truth,
}

/// One second-stage configuration (a Table 3 row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageVariant {
    pub inner_knots: usize,
    pub ridge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSettings {
    pub replications: usize,
    pub spline_order: usize,
    /// Second-stage rows; empty runs the first stage only.
    pub variants: Vec<StageVariant>,
    /// Ridge penalty is `ridge_scale / n` for variants with `ridge`.
    pub ridge_scale: f64,
    pub infeasible: bool,
    pub em: EmConfig,
    pub em_start: EmStart,
    pub x: [f64; 2],
    pub grid: Vec<f64>,
    /// Confidence level for coverage; `None` skips standard errors.
    pub ci_level: Option<f64>,
    /// Abort when more than this share of replications fail.
    pub max_failure_rate: f64,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            replications: 1000,
            spline_order: 3,
            variants: vec![StageVariant {
                inner_knots: 1,
                ridge: true,
            }],
            ridge_scale: 10.0,
            infeasible: true,
            em: EmConfig::default(),
            em_start: EmStart::Pooled,
            x: [1.0, 0.5],
            grid: vec![0.2, 0.4, 0.6, 0.8],
            ci_level: Some(0.95),
            max_failure_rate: 0.05,
        }
    }
}

impl McSettings {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("monte carlo needs at least one replication"));
        }
        BasisSpec::new(self.spline_order, 0)?;
        if self.grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("MTE grid points must lie in [0, 1]"));
        }
        if let Some(l) = self.ci_level {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::invalid("ci_level must lie in (0, 1)"));
            }
        }
        if !(self.ridge_scale >= 0.0) {
            return Err(Error::invalid("ridge_scale must be non-negative"));
        }
        Ok(())
    }

    fn solver(&self, variant: &StageVariant) -> SolverConfig {
        if variant.ridge {
            SolverConfig {
                ridge: RidgePenalty::PerObservation(self.ridge_scale),
                ..SolverConfig::default()
            }
        } else {
            SolverConfig::min_norm()
        }
    }
}

/// MTE estimates of one estimator cell in one replication, group-major over
/// the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub estimator: StageSource,
    pub variant: StageVariant,
    pub mte: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEstimates {
    /// `gamma_j` per group, then `pi`.
    pub ml: Vec<f64>,
    pub cells: Vec<CellEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimates: Option<ReplicationEstimates>,
    pub error: Option<String>,
}

fn em_seed(base: u64, replication: usize) -> u64 {
    base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(replication as u64 + 1)
}

fn replicate(config: &DgpConfig, settings: &McSettings, base_seed: u64, r: usize) -> Result<ReplicationEstimates> {
    let sim = simulate_with(config, &mut stream_rng(base_seed, r as u64))?;
    let data = sim.dataset()?;
    let em = EmConfig {
        seed: em_seed(base_seed, r),
        ..settings.em
    };
    let fit = match settings.em_start {
        EmStart::Pooled => em_fit(&data, &em)?,
        EmStart::Truth => {
            let init = MixtureProbitParams {
                gamma: config.gamma.iter().map(|g| DVector::from_column_slice(g)).collect(),
                pi: config.pi.clone(),
            };
            em_fit_from(&data, &em, &init)?
        }
    };
    let ml: Vec<f64> = fit
        .params
        .gamma
        .iter()
        .flat_map(|g| g.iter().copied())
        .chain(fit.params.pi.iter().copied())
        .collect();
    let mut cells = Vec::new();
    if !settings.variants.is_empty() {
        let mut inputs = vec![StageInput::from_mixture(&fit, false)?];
        if settings.infeasible {
            inputs.push(sim.infeasible_input()?);
        }
        for input in &inputs {
            for variant in &settings.variants {
                let basis = BasisSpec::new(settings.spline_order, variant.inner_knots)?;
                let stage = fit_outcome_stage(&data, input, &basis, &settings.solver(variant))?;
                let mats = match settings.ci_level {
                    Some(_) => Some(build_inference_matrices(&data, input, &stage)?),
                    None => None,
                };
                let mut est = Vec::new();
                let mut se = Vec::new();
                for j in 0..config.n_groups() {
                    for &v in &settings.grid {
                        est.push(mte(&stage, j, &settings.x, v)?);
                        if let Some(m) = &mats {
                            se.push(mte_se(m, &stage, j, v)?.se);
                        }
                    }
                }
                cells.push(CellEstimate {
                    estimator: input.source,
                    variant: *variant,
                    mte: est,
                    se: mats.map(|_| se),
                });
            }
        }
    }
    Ok(ReplicationEstimates { ml, cells })
}

/// Runs replications `0..settings.replications` in parallel. Failures are
/// recorded, not propagated.
pub fn mc_records(config: &DgpConfig, settings: &McSettings, base_seed: u64) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    settings.validate()?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let total = settings.replications;
    let records = (0..total)
        .into_par_iter()
        .map(|r| {
            let out = replicate(config, settings, base_seed, r);
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if k.is_multiple_of(50) || k == total {
                info!("monte carlo n = {}: {k}/{total} replications", config.n);
            }
            match out {
                Ok(e) => ReplicationRecord {
                    replication: r,
                    estimates: Some(e),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    replication: r,
                    estimates: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlSummary {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: StageSource,
    pub n: usize,
    pub inner_knots: usize,
    pub ridge: bool,
    /// `MTE1.1`, ... group-major over the grid.
    pub labels: Vec<String>,
    pub truth: Vec<f64>,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    pub coverage: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n: usize,
    pub replications: usize,
    pub successes: usize,
    pub failures: Vec<ReplicationFailure>,
    pub base_seed: u64,
    pub ci_level: Option<f64>,
    pub grid: Vec<f64>,
    pub x: [f64; 2],
    pub ml: MlSummary,
    pub cells: Vec<CellSummary>,
}

fn bias_rmse(errors: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let m = errors.len() as f64;
    let mut bias = vec![0.0; width];
    let mut mse = vec![0.0; width];
    for e in errors {
        for k in 0..width {
            bias[k] += e[k];
            mse[k] += e[k] * e[k];
        }
    }
    let bias: Vec<f64> = bias.into_iter().map(|b| b / m).collect();
    // RMSE >= |bias| holds exactly in real arithmetic; keep it after rounding
    let rmse = mse
        .into_iter()
        .zip(&bias)
        .map(|(s, b)| (s / m).sqrt().max(b.abs()))
        .collect();
    (bias, rmse)
}

pub fn ml_names(config: &DgpConfig) -> Vec<String> {
    let s = config.n_groups();
    let mut names: Vec<String> = (1..=s)
        .flat_map(|j| (1..=3).map(move |k| format!("gamma{j}{k}")))
        .collect();
    names.extend((1..=s).map(|j| format!("pi{j}")));
    names
}

/// Aggregates `records` (in replication order) into bias, RMSE and coverage.
pub fn summarize(
    config: &DgpConfig,
    settings: &McSettings,
    base_seed: u64,
    records: &[ReplicationRecord],
) -> Result<McReport> {
    let total = records.len();
    if total == 0 {
        return Err(Error::invalid("no replications to summarize"));
    }
    let failures: Vec<ReplicationFailure> = records
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|m| ReplicationFailure {
                replication: r.replication,
                message: m.clone(),
            })
        })
        .collect();
    if failures.len() as f64 > settings.max_failure_rate * total as f64 {
        return Err(Error::McAbort {
            failed: failures.len(),
            replications: total,
        });
    }
    let ok: Vec<&ReplicationEstimates> = records.iter().filter_map(|r| r.estimates.as_ref()).collect();
    if ok.is_empty() {
        return Err(Error::McAbort {
            failed: total,
            replications: total,
        });
    }

    let ml_truth: Vec<f64> = config
        .gamma
        .iter()
        .flat_map(|g| g.iter().copied())
        .chain(config.pi.iter().copied())
        .collect();
    let ml_errors: Vec<Vec<f64>> = ok
        .iter()
        .map(|e| e.ml.iter().zip(&ml_truth).map(|(a, b)| a - b).collect())
        .collect();
    let (bias, rmse) = bias_rmse(&ml_errors, ml_truth.len());
    let ml = MlSummary {
        names: ml_names(config),
        truth: ml_truth,
        bias,
        rmse,
    };

    let s = config.n_groups();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for j in 0..s {
        for (k, &v) in settings.grid.iter().enumerate() {
            labels.push(format!("MTE{}.{}", j + 1, k + 1));
            truth.push(true_mte(config, j, &settings.x, v));
        }
    }
    let z = settings.ci_level.map(|l| normal_quantile(1.0 - (1.0 - l) / 2.0)).transpose()?;
    let n_cells = ok[0].cells.len();
    let mut cells = Vec::with_capacity(n_cells);
    for c in 0..n_cells {
        let head = &ok[0].cells[c];
        let errors: Vec<Vec<f64>> = ok
            .iter()
            .map(|e| e.cells[c].mte.iter().zip(&truth).map(|(a, b)| a - b).collect())
            .collect();
        let (bias, rmse) = bias_rmse(&errors, truth.len());
        let coverage = z.and_then(|z| {
            let mut hits = vec![0usize; truth.len()];
            for e in &ok {
                let cell = &e.cells[c];
                let se = cell.se.as_ref()?;
                for k in 0..truth.len() {
                    if (cell.mte[k] - truth[k]).abs() <= z * se[k] {
                        hits[k] += 1;
                    }
                }
            }
            Some(hits.into_iter().map(|h| h as f64 / ok.len() as f64).collect())
        });
        cells.push(CellSummary {
            estimator: head.estimator,
            n: config.n,
            inner_knots: head.variant.inner_knots,
            ridge: head.variant.ridge,
            labels: labels.clone(),
            truth: truth.clone(),
            bias,
            rmse,
            coverage,
        });
    }
    Ok(McReport {
        n: config.n,
        replications: total,
        successes: ok.len(),
        failures,
        base_seed,
        ci_level: settings.ci_level,
        grid: settings.grid.clone(),
        x: settings.x,
        ml,
        cells,
    })
}

/// Simulate, fit and evaluate `settings.replications` times at `config.n`.
pub fn mc_run(config: &DgpConfig, settings: &McSettings, base_seed: u64) -> Result<McReport> {
    let records = mc_records(config, settings, base_seed)?;
    summarize(config, settings, base_seed, &records)
}

fn estimator_name(s: StageSource) -> &'static str {
    match s {
        StageSource::Feasible => "feasible",
        StageSource::Infeasible => "infeasible",
    }
}

/// Table 3 layout: one row per statistic, estimator and stage variant.
pub fn write_table3<W: Write>(reports: &[McReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let labels = reports
        .iter()
        .flat_map(|r| r.cells.first())
        .map(|c| c.labels.clone())
        .next()
        .unwrap_or_default();
    let mut header = vec!["statistic".to_string(), "estimator".into(), "n".into(), "inner_knots".into(), "ridge".into()];
    header.extend(labels);
    w.write_record(&header)?;
    for stat in ["bias", "rmse", "coverage"] {
        for est in [StageSource::Feasible, StageSource::Infeasible] {
            for r in reports {
                for c in r.cells.iter().filter(|c| c.estimator == est) {
                    let values = match stat {
                        "bias" => &c.bias,
                        "rmse" => &c.rmse,
                        _ => match &c.coverage {
                            Some(v) => v,
                            None => continue,
                        },
                    };
                    let mut row = vec![
                        stat.to_string(),
                        estimator_name(est).into(),
                        c.n.to_string(),
                        c.inner_knots.to_string(),
                        u8::from(c.ridge).to_string(),
                    ];
                    row.extend(values.iter().map(|v| format_number(*v, Some(10))));
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Table 4 layout: bias and RMSE rows per sample size.
pub fn write_table4<W: Write>(reports: &[McReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = reports.first().map(|r| r.ml.names.clone()).unwrap_or_default();
    let mut header = vec!["statistic".to_string(), "n".into()];
    header.extend(names);
    w.write_record(&header)?;
    for stat in ["bias", "rmse"] {
        for r in reports {
            let values = if stat == "bias" { &r.ml.bias } else { &r.ml.rmse };
            let mut row = vec![stat.to_string(), r.n.to_string()];
            row.extend(values.iter().map(|v| format_number(*v, Some(10))));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(r: usize, ml: Vec<f64>, mte: Vec<f64>) -> ReplicationRecord {
        ReplicationRecord {
            replication: r,
            estimates: Some(ReplicationEstimates {
                ml,
                cells: vec![CellEstimate {
                    estimator: StageSource::Feasible,
                    variant: StageVariant { inner_knots: 1, ridge: true },
                    se: Some(vec![0.1; mte.len()]),
                    mte,
                }],
            }),
            error: None,
        }
    }

    fn failed(r: usize) -> ReplicationRecord {
        ReplicationRecord {
            replication: r,
            estimates: None,
            error: Some("boom".into()),
        }
    }

    #[test]
    fn single_replication_rmse_is_abs_bias() {
        let cfg = DgpConfig::default();
        let settings = McSettings::default();
        let mut ml: Vec<f64> = cfg.gamma.iter().flatten().copied().chain(cfg.pi.clone()).collect();
        ml[0] += 0.3;
        let truth: Vec<f64> = (0..2)
            .flat_map(|j| settings.grid.iter().map(move |&v| true_mte(&DgpConfig::default(), j, &[1.0, 0.5], v)))
            .collect();
        let mte: Vec<f64> = truth.iter().map(|t| t - 0.05).collect();
        let rep = summarize(&cfg, &settings, 0, &[record(0, ml, mte)]).unwrap();
        assert!((rep.ml.bias[0] - 0.3).abs() < 1e-12);
        assert_eq!(rep.ml.rmse[0], rep.ml.bias[0].abs());
        let cell = &rep.cells[0];
        for k in 0..8 {
            assert!((cell.bias[k] + 0.05).abs() < 1e-12);
            assert_eq!(cell.rmse[k], cell.bias[k].abs());
            assert_eq!(cell.coverage.as_ref().unwrap()[k], 1.0);
        }
        assert_eq!(cell.labels[5], "MTE2.2");
    }

    #[test]
    fn failure_rule() {
        let cfg = DgpConfig::default();
        let settings = McSettings::default();
        let ml: Vec<f64> = vec![0.0; 8];
        let mut recs: Vec<_> = (0..20).map(|r| record(r, ml.clone(), vec![0.0; 8])).collect();
        recs[3] = failed(3);
        let rep = summarize(&cfg, &settings, 0, &recs).unwrap();
        assert_eq!((rep.successes, rep.failures.len()), (19, 1));
        recs[4] = failed(4);
        assert!(matches!(summarize(&cfg, &settings, 0, &recs), Err(Error::McAbort { failed: 2, .. })));
    }

    #[test]
    fn small_run_is_deterministic() {
        let cfg = DgpConfig { n: 300, ..DgpConfig::default() };
        let settings = McSettings {
            replications: 2,
            em: EmConfig { n_starts: 2, ..EmConfig::default() },
            ..McSettings::default()
        };
        let a = mc_run(&cfg, &settings, 9).unwrap();
        let b = mc_run(&cfg, &settings, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replications, 2);
        assert_eq!(a.cells.len(), 2);
        let mut buf = Vec::new();
        write_table3(std::slice::from_ref(&a), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        let mut buf = Vec::new();
        write_table4(&[a], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("statistic,n,gamma11,"));
    }
}
