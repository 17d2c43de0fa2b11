//! Command-line front end: JSON run configs in, versioned artifacts out.
//!
//! Every output file is written to a temporary sibling and renamed into
//! place, so an interrupted run never leaves a partial artifact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregates::{
    ate, cate, prte, wald_late, AggregateReport, AteSummary, BinaryIvDataset, CateEntry,
    CounterfactualPolicy, LateContrast,
};
use crate::data::{format_number, load_csv, read_numeric_columns, ColumnRoles, Dataset, GroupSpec};
use crate::dgp::{simulate, DgpConfig};
use crate::error::Error;
use crate::inference::{build_inference_matrices, mte_ci};
use crate::mc::{mc_run, write_table3, write_table4, McReport, McSettings};
use crate::mixture::{em_fit, propensities, EmConfig, MixtureFitArtifact};
use crate::numeric::{BasisSpec, SolverConfig};
use crate::series::{default_grid, fit_outcome_stage, MteCurve, OutcomeStageFit, StageInput};

pub const SCHEMA_VERSION: u32 = 1;
/// Significant digits in every CSV artifact.
pub const CSV_DIGITS: usize = 10;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;
pub const EXIT_MC_ABORT: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "mixture-mte", version, about = "Group-wise MTE estimation under a finite mixture of latent groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Random seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a synthetic sample from the mixture design.
    Simulate,
    /// Fit the mixture Probit and the MTE series regressions.
    Fit,
    /// Monte Carlo bias/RMSE tables.
    Mc,
    /// CATE, ATE, PRTE and LATE from a previous fit.
    Aggregate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Mc => "mc",
            Command::Aggregate => "aggregate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with the observed columns; required by `fit` and `aggregate`.
    pub path: Option<PathBuf>,
    pub roles: ColumnRoles,
    pub groups: GroupSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            roles: DgpConfig::column_roles(),
            groups: DgpConfig::default().group_spec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McCommandConfig {
    pub sample_sizes: Vec<usize>,
    pub settings: McSettings,
}

impl Default for McCommandConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![1000, 4000],
            settings: McSettings::default(),
        }
    }
}

/// Counterfactual propensities for PRTE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySource {
    None,
    /// The fitted propensities themselves (no change).
    Factual,
    /// `P*_j = value` for everyone.
    Constant { value: f64 },
    /// Columns `p1..pS`, optionally with an `obs` index for multiple draws.
    Csv { path: PathBuf },
}

/// Binary-instrument data for Wald LATEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateConfig {
    pub path: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub instruments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Directory holding `mixture_fit.json` and `outcome_fit.json`;
    /// defaults to the output directory.
    pub fit_dir: Option<PathBuf>,
    pub policy: PolicySource,
    pub late: Option<LateConfig>,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            fit_dir: None,
            policy: PolicySource::Factual,
            late: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub basis: BasisSpec,
    pub solver: SolverConfig,
    pub em: EmConfig,
    /// Refit even when a component's weight is below `em.min_pi`.
    pub force: bool,
    pub grid: Vec<f64>,
    /// Covariate points (full `X` rows, intercept included) for MTE curves
    /// and CATEs.
    pub x_points: Vec<Vec<f64>>,
    pub ci_level: f64,
    pub dgp: DgpConfig,
    pub mc: McCommandConfig,
    pub aggregate: AggregateConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            basis: BasisSpec::default(),
            solver: SolverConfig::default(),
            em: EmConfig::default(),
            force: false,
            grid: default_grid(),
            x_points: vec![vec![1.0, 0.5]],
            ci_level: 0.95,
            dgp: DgpConfig::default(),
            mc: McCommandConfig::default(),
            aggregate: AggregateConfig::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        if self.grid.is_empty() || self.grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("grid must be non-empty with points in [0, 1]".into());
        }
        if self.em.n_starts == 0 {
            return bad("em.n_starts must be at least 1".into());
        }
        self.solver.validate().map_err(CliError::from_error)?;
        self.dgp.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.mc.settings.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn from_error(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_) => EXIT_CONFIG,
            Error::DataCell { .. } | Error::Data(_) | Error::Io { .. } | Error::Csv(_) | Error::Json(_) => EXIT_DATA,
            Error::McAbort { .. } => EXIT_MC_ABORT,
            _ => EXIT_ESTIMATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::from_error(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>) -> crate::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn provenance(command: Command, cfg: &RunConfig) -> Provenance {
    Provenance {
        schema_version: SCHEMA_VERSION,
        command: command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
    }
}

/// `simulated.csv`, `latent.csv`, `provenance.json`.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    if cfg.dgp.n == 0 {
        return Err(CliError::config("dgp.n must be at least 1"));
    }
    let sim = simulate(&cfg.dgp, cfg.seed)?;
    let observed = csv_bytes(|b| sim.write_observed_csv(b, Some(CSV_DIGITS)))?;
    let latent = csv_bytes(|b| sim.write_latent_csv(b, Some(CSV_DIGITS)))?;
    let out = &cfg.out;
    let paths = [out.join("simulated.csv"), out.join("latent.csv"), out.join("provenance.json")];
    write_atomic(&paths[0], &observed)?;
    write_atomic(&paths[1], &latent)?;
    write_json(&paths[2], &provenance(Command::Simulate, cfg))?;
    Ok(paths.to_vec())
}

fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::config("data.path is required for this command"))?;
    for v in crate::data::validate_exclusions(&cfg.data.groups, &cfg.data.roles.covariates) {
        log::warn!("group {}: {}", v.group + 1, v.message);
    }
    Ok(load_csv(path, &cfg.data.groups, &cfg.data.roles)?)
}

fn check_x_points(cfg: &RunConfig, dim_x: usize) -> CliResult<()> {
    if let Some(x) = cfg.x_points.iter().find(|x| x.len() != dim_x) {
        return Err(CliError::config(format!(
            "x point {x:?} has length {}, the covariate vector has {dim_x}",
            x.len()
        )));
    }
    Ok(())
}

fn curve_csv(curves: &[MteCurve]) -> crate::Result<Vec<u8>> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["group", "p", "mte", "se", "lo", "hi"])?;
        let f = |v: Option<f64>| v.map(|v| format_number(v, Some(CSV_DIGITS))).unwrap_or_default();
        for c in curves {
            for pt in &c.points {
                w.write_record([
                    (c.group + 1).to_string(),
                    format_number(pt.p, Some(CSV_DIGITS)),
                    format_number(pt.mte, Some(CSV_DIGITS)),
                    f(pt.se),
                    f(pt.lo),
                    f(pt.hi),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: u32,
    pub n: usize,
    pub loglik: f64,
    pub aic: f64,
    pub pi: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub converged: bool,
    pub ate: AteSummary,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// `mixture_fit.json`, `outcome_fit.json`, `mte_curve_x1.csv`, ..., `summary.json`.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg)?;
    check_x_points(cfg, data.dim_x())?;
    let em = EmConfig { seed: cfg.seed, ..cfg.em };
    let fit = em_fit(&data, &em)?;
    info!("mixture fit: loglik {:.6}, pi {:?}", fit.loglik, fit.params.pi);
    let input = StageInput::from_mixture(&fit, cfg.force)?;
    let stage = fit_outcome_stage(&data, &input, &cfg.basis, &cfg.solver)?;
    let mats = build_inference_matrices(&data, &input, &stage)?;
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for (k, x) in cfg.x_points.iter().enumerate() {
        let curves = (0..data.n_groups())
            .map(|j| mte_ci(&stage, &mats, j, x, &cfg.grid, cfg.ci_level))
            .collect::<crate::Result<Vec<_>>>()?;
        files.push((cfg.out.join(format!("mte_curve_x{}.csv", k + 1)), curve_csv(&curves)?));
    }
    let artifact = fit.to_artifact(&data);
    let summary = FitSummary {
        schema_version: SCHEMA_VERSION,
        n: data.n(),
        loglik: fit.loglik,
        aic: fit.aic,
        pi: artifact.pi.clone(),
        gamma: artifact.gamma.clone(),
        converged: fit.converged,
        ate: ate(&stage, &data)?,
        warnings: fit.warnings.clone(),
        provenance: provenance(Command::Fit, cfg),
    };
    let mut paths = vec![cfg.out.join("mixture_fit.json"), cfg.out.join("outcome_fit.json")];
    write_json(&paths[0], &artifact)?;
    write_json(&paths[1], &stage)?;
    for (p, bytes) in files {
        write_atomic(&p, &bytes)?;
        paths.push(p);
    }
    let sp = cfg.out.join("summary.json");
    write_json(&sp, &summary)?;
    paths.push(sp);
    Ok(paths)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McOutput {
    pub schema_version: u32,
    pub reports: Vec<McReport>,
    pub provenance: Provenance,
}

/// `table3.csv`, `table4.csv`, `mc_report.json`.
pub fn cmd_mc(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    if cfg.mc.sample_sizes.is_empty() {
        return Err(CliError::config("mc.sample_sizes is empty"));
    }
    let mut reports = Vec::new();
    for &n in &cfg.mc.sample_sizes {
        let dgp = DgpConfig { n, ..cfg.dgp.clone() };
        info!("monte carlo: n = {n}, {} replications", cfg.mc.settings.replications);
        reports.push(mc_run(&dgp, &cfg.mc.settings, cfg.seed)?);
    }
    let t3 = csv_bytes(|b| write_table3(&reports, b))?;
    let t4 = csv_bytes(|b| write_table4(&reports, b))?;
    let paths = vec![cfg.out.join("table3.csv"), cfg.out.join("table4.csv"), cfg.out.join("mc_report.json")];
    write_atomic(&paths[0], &t3)?;
    write_atomic(&paths[1], &t4)?;
    write_json(
        &paths[2],
        &McOutput {
            schema_version: SCHEMA_VERSION,
            reports,
            provenance: provenance(Command::Mc, cfg),
        },
    )?;
    Ok(paths)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> crate::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateOutput {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: AggregateReport,
    pub provenance: Provenance,
}

fn load_binary_iv(late: &LateConfig) -> crate::Result<BinaryIvDataset> {
    let mut wanted: std::collections::BTreeSet<String> = late.instruments.iter().cloned().collect();
    wanted.insert(late.outcome.clone());
    wanted.insert(late.treatment.clone());
    let f = fs::File::open(&late.path).map_err(|e| Error::io(&late.path, e))?;
    let cols = read_numeric_columns(std::io::BufReader::new(f), &wanted)?;
    let n = cols[&late.outcome].len();
    let z = nalgebra::DMatrix::from_fn(n, late.instruments.len(), |i, j| cols[&late.instruments[j]][i]);
    BinaryIvDataset::new(
        nalgebra::DVector::from_column_slice(&cols[&late.outcome]),
        nalgebra::DVector::from_column_slice(&cols[&late.treatment]),
        z,
    )
    .map_err(|e| Error::Data(e.to_string()))
}

/// `aggregate_report.json` from the artifacts of a previous `fit`.
pub fn cmd_aggregate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let fit_dir = cfg.aggregate.fit_dir.clone().unwrap_or_else(|| cfg.out.clone());
    let stage: OutcomeStageFit = read_json(&fit_dir.join("outcome_fit.json"))?;
    let mixture: MixtureFitArtifact = read_json(&fit_dir.join("mixture_fit.json"))?;
    let data = load_data(cfg)?;
    check_x_points(cfg, data.dim_x())?;
    if data.n() != stage.n_obs {
        return Err(CliError::from_error(Error::Data(format!(
            "data has {} rows, the fit was made on {}",
            data.n(),
            stage.n_obs
        ))));
    }
    let mut entries = Vec::new();
    for j in 0..stage.n_groups {
        for x in &cfg.x_points {
            entries.push(CateEntry {
                group: j + 1,
                x: x.clone(),
                value: cate(&stage, j, x)?,
            });
        }
    }
    let factual = StageInput::new(
        stage.pi.clone(),
        propensities(&mixture.params(), data.z_blocks())?,
        stage.source,
    )?;
    let policy = match &cfg.aggregate.policy {
        PolicySource::None => None,
        PolicySource::Factual => Some(CounterfactualPolicy::deterministic(&factual.propensities)?),
        PolicySource::Constant { value } => Some(CounterfactualPolicy::new(
            data.n(),
            stage.n_groups,
            1,
            vec![*value; data.n() * stage.n_groups],
        )?),
        PolicySource::Csv { path } => Some(CounterfactualPolicy::read_csv_path(path, data.n(), stage.n_groups)?),
    };
    let prte = policy.map(|p| prte(&stage, &data, &factual, &p)).transpose()?;
    let mut late = Vec::new();
    if let Some(lc) = &cfg.aggregate.late {
        let iv = load_binary_iv(lc)?;
        late.push(wald_late(&iv, LateContrast::AllOnes)?);
        for j in 0..iv.n_groups() {
            late.push(wald_late(&iv, LateContrast::Unit(j))?);
        }
    }
    let report = AggregateReport {
        cate: entries,
        ate: ate(&stage, &data)?,
        prte,
        late,
    };
    let path = cfg.out.join("aggregate_report.json");
    write_json(
        &path,
        &AggregateOutput {
            schema_version: SCHEMA_VERSION,
            report,
            provenance: provenance(Command::Aggregate, cfg),
        },
    )?;
    Ok(vec![path])
}

/// Resolves the configuration and runs one subcommand; returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(paths) => {
            for p in paths {
                info!("wrote {}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::from_error(Error::io(&cfg.out, e)))?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Mc => cmd_mc(&cfg),
        Command::Aggregate => cmd_aggregate(&cfg),
    }
}
