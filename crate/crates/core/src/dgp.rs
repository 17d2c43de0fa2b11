//! Synthetic data from the two-group mixture design, plus closed-form truths.
//!
//! Per observation: `X1`, the instruments `zeta_1..zeta_S` (or binary `z_j`),
//! the latent group `s`, the first-stage errors `eps_1..eps_S`, then
//! `eta0`, `eta1`, always in that order. Randomness is ChaCha8 keyed by
//! `(seed, stream)`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregates::BinaryIvDataset;
use crate::data::{format_number, ColumnRoles, Dataset, GroupSpec, InstrumentBlock};
use crate::error::{Error, Result};
use crate::numeric::normal_cdf;
use crate::series::{StageInput, StageSource};

/// How the excluded instruments are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstrumentDesign {
    /// `zeta_j ~ N(0, 1)` with coefficient `gamma_j[2]`.
    Continuous,
    /// `z_j ~ Bernoulli(1/2)` entering the index as `strength * (z_j - 1/2)`
    /// in place of `gamma_j[2] zeta_j`.
    Binary {
        #[serde(default = "default_strength")]
        strength: f64,
    },
}

fn default_strength() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub pi: Vec<f64>,
    /// `(intercept, X1, zeta_j)` per group.
    pub gamma: Vec<[f64; 3]>,
    /// `(intercept, X1)` per group, untreated outcome.
    pub beta0: Vec<[f64; 2]>,
    /// `(intercept, X1)` per group, treated outcome.
    pub beta1: Vec<[f64; 2]>,
    /// Standard deviation of `eta0` and `eta1`.
    pub noise_sd: f64,
    pub instruments: InstrumentDesign,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            pi: vec![0.35, 0.65],
            gamma: vec![[0.0, -0.5, 0.5], [0.0, 0.3, -0.7]],
            beta0: vec![[-1.0, 1.0], [1.0, 2.0]],
            beta1: vec![[1.0, -1.0], [2.0, 1.0]],
            noise_sd: 0.5,
            instruments: InstrumentDesign::Continuous,
        }
    }
}

impl DgpConfig {
    /// The default design with binary instruments.
    pub fn binary_iv() -> Self {
        Self {
            instruments: InstrumentDesign::Binary {
                strength: default_strength(),
            },
            ..Self::default()
        }
    }

    pub fn n_groups(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.pi.len();
        if s == 0 {
            return Err(Error::invalid("the design needs at least one group"));
        }
        if self.gamma.len() != s || self.beta0.len() != s || self.beta1.len() != s {
            return Err(Error::invalid("gamma, beta0 and beta1 need one entry per group"));
        }
        if self.pi.iter().any(|p| !(*p > 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("pi must be positive and sum to one"));
        }
        let finite = self
            .gamma
            .iter()
            .flatten()
            .chain(self.beta0.iter().flatten())
            .chain(self.beta1.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("design coefficients must be finite"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid("noise_sd must be finite and non-negative"));
        }
        if let InstrumentDesign::Binary { strength } = self.instruments {
            if !strength.is_finite() {
                return Err(Error::invalid("instrument strength must be finite"));
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.instruments, InstrumentDesign::Binary { .. })
    }

    /// Observed instrument column names, `zeta1..` or `z1..`.
    pub fn instrument_names(&self) -> Vec<String> {
        let stem = if self.is_binary() { "z" } else { "zeta" };
        (1..=self.n_groups()).map(|j| format!("{stem}{j}")).collect()
    }

    /// `Z_j = (1, X1, zeta_j)`, matching [`SimulatedDataset::dataset`].
    pub fn group_spec(&self) -> GroupSpec {
        GroupSpec {
            groups: self
                .instrument_names()
                .into_iter()
                .map(|c| InstrumentBlock::new(["x1".to_string(), c]))
                .collect(),
        }
    }

    pub fn column_roles() -> ColumnRoles {
        ColumnRoles {
            outcome: "y".into(),
            treatment: "d".into(),
            covariates: vec!["x1".into()],
            covariate_intercept: true,
        }
    }
}

/// RNG for `(seed, stream)`; distinct streams never share draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A simulated sample with its latent bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub config: DgpConfig,
    pub y: DVector<f64>,
    pub d: DVector<f64>,
    pub x1: DVector<f64>,
    /// `n x S`: `zeta_j`, or binary `z_j`.
    pub instruments: DMatrix<f64>,
    /// 0-based latent group.
    pub s: Vec<usize>,
    /// `n x S`, `V_j = Phi(eps_j)`.
    pub v: DMatrix<f64>,
    /// `n x S` true propensities `Phi(Z_j' gamma_j)`.
    pub p: DMatrix<f64>,
    pub y0: DVector<f64>,
    pub y1: DVector<f64>,
    /// Own-group treatment with the own instrument forced to 0 and to 1
    /// (binary design only).
    pub potential_treatments: Option<(DVector<f64>, DVector<f64>)>,
}

/// Draws `config.n` observations from stream 0 of `seed`.
pub fn simulate(config: &DgpConfig, seed: u64) -> Result<SimulatedDataset> {
    simulate_with(config, &mut stream_rng(seed, 0))
}

pub fn simulate_with(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<SimulatedDataset> {
    config.validate()?;
    let n = config.n;
    if n == 0 {
        return Err(Error::invalid("simulation needs n >= 1"));
    }
    let s_count = config.n_groups();
    let mut cum = Vec::with_capacity(s_count);
    let mut acc = 0.0;
    for p in &config.pi {
        acc += p;
        cum.push(acc);
    }
    let strength = match config.instruments {
        InstrumentDesign::Binary { strength } => Some(strength),
        InstrumentDesign::Continuous => None,
    };
    let mut out = SimulatedDataset {
        config: config.clone(),
        y: DVector::zeros(n),
        d: DVector::zeros(n),
        x1: DVector::zeros(n),
        instruments: DMatrix::zeros(n, s_count),
        s: vec![0; n],
        v: DMatrix::zeros(n, s_count),
        p: DMatrix::zeros(n, s_count),
        y0: DVector::zeros(n),
        y1: DVector::zeros(n),
        potential_treatments: strength.map(|_| (DVector::zeros(n), DVector::zeros(n))),
    };
    let mut index = vec![0.0; s_count];
    let mut eps = vec![0.0; s_count];
    for i in 0..n {
        let x1: f64 = rng.sample(StandardNormal);
        for j in 0..s_count {
            let inst = match strength {
                None => rng.sample(StandardNormal),
                Some(_) => f64::from(u8::from(rng.random::<f64>() < 0.5)),
            };
            out.instruments[(i, j)] = inst;
        }
        let u: f64 = rng.random();
        let s = cum.iter().position(|c| u < *c).unwrap_or(s_count - 1);
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let eta0: f64 = rng.sample::<f64, _>(StandardNormal) * config.noise_sd;
        let eta1: f64 = rng.sample::<f64, _>(StandardNormal) * config.noise_sd;

        let base = |j: usize| config.gamma[j][0] + config.gamma[j][1] * x1;
        for j in 0..s_count {
            let z = out.instruments[(i, j)];
            index[j] = base(j)
                + match strength {
                    None => config.gamma[j][2] * z,
                    Some(k) => k * (z - 0.5),
                };
            out.p[(i, j)] = normal_cdf(index[j]);
            out.v[(i, j)] = normal_cdf(eps[j]);
        }
        let vs = out.v[(i, s)];
        let d = f64::from(u8::from(out.p[(i, s)] >= vs));
        if let (Some(k), Some((d0, d1))) = (strength, out.potential_treatments.as_mut()) {
            d0[i] = f64::from(u8::from(normal_cdf(base(s) - 0.5 * k) >= vs));
            d1[i] = f64::from(u8::from(normal_cdf(base(s) + 0.5 * k) >= vs));
        }
        let y0 = config.beta0[s][0] + config.beta0[s][1] * x1 + vs + eta0;
        let y1 = config.beta1[s][0] + config.beta1[s][1] * x1 + vs * vs + eta1;
        out.x1[i] = x1;
        out.s[i] = s;
        out.d[i] = d;
        out.y0[i] = y0;
        out.y1[i] = y1;
        out.y[i] = d * y1 + (1.0 - d) * y0;
    }
    Ok(out)
}

impl SimulatedDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn observed_columns(&self) -> Vec<(String, Vec<f64>)> {
        let mut cols = vec![
            ("y".to_string(), self.y.iter().copied().collect()),
            ("d".to_string(), self.d.iter().copied().collect()),
            ("x1".to_string(), self.x1.iter().copied().collect()),
        ];
        for (j, name) in self.config.instrument_names().into_iter().enumerate() {
            cols.push((name, self.instruments.column(j).iter().copied().collect()));
        }
        cols
    }

    /// The observed sample as an estimation dataset (`X = (1, X1)`,
    /// `Z_j = (1, X1, zeta_j)`). Fails if one treatment arm is empty.
    pub fn dataset(&self) -> Result<Dataset> {
        let cols: HashMap<String, Vec<f64>> = self.observed_columns().into_iter().collect();
        Dataset::from_columns(&cols, &DgpConfig::column_roles(), &self.config.group_spec())
    }

    /// True `(pi, P)` for the infeasible second stage.
    pub fn infeasible_input(&self) -> Result<StageInput> {
        StageInput::new(self.config.pi.clone(), self.p.clone(), StageSource::Infeasible)
    }

    /// Binary-instrument view; requires the binary design.
    pub fn binary_iv(&self) -> Result<BinaryIvDataset> {
        if !self.config.is_binary() {
            return Err(Error::invalid("binary-IV view needs the binary instrument design"));
        }
        BinaryIvDataset::new(self.y.clone(), self.d.clone(), self.instruments.clone())
    }

    /// Complier average of `Y1 - Y0` in group `j` and the complier share of
    /// that group; `None` outside the binary design or without compliers.
    pub fn complier_late(&self, group: usize) -> Option<(f64, f64)> {
        let (d0, d1) = self.potential_treatments.as_ref()?;
        let members: Vec<usize> = (0..self.n()).filter(|&i| self.s[i] == group).collect();
        let compliers: Vec<usize> = members.iter().copied().filter(|&i| d1[i] > d0[i]).collect();
        if compliers.is_empty() {
            return None;
        }
        let late = compliers.iter().map(|&i| self.y1[i] - self.y0[i]).sum::<f64>() / compliers.len() as f64;
        Some((late, compliers.len() as f64 / members.len() as f64))
    }

    /// Writes `y, d, x1` and the instrument columns.
    pub fn write_observed_csv<W: Write>(&self, writer: W, significant_digits: Option<usize>) -> Result<()> {
        write_columns(writer, &self.observed_columns(), significant_digits)
    }

    /// Writes the oracle columns: `s` (1-based), `v*`, `p*`, `y0`, `y1`, and
    /// `d_z0`, `d_z1` under the binary design.
    pub fn write_latent_csv<W: Write>(&self, writer: W, significant_digits: Option<usize>) -> Result<()> {
        let mut cols = vec![("s".to_string(), self.s.iter().map(|s| (s + 1) as f64).collect())];
        let s = self.config.n_groups();
        for j in 0..s {
            cols.push((format!("v{}", j + 1), self.v.column(j).iter().copied().collect()));
        }
        for j in 0..s {
            cols.push((format!("p{}", j + 1), self.p.column(j).iter().copied().collect()));
        }
        cols.push(("y0".into(), self.y0.iter().copied().collect()));
        cols.push(("y1".into(), self.y1.iter().copied().collect()));
        if let Some((d0, d1)) = &self.potential_treatments {
            cols.push(("d_z0".into(), d0.iter().copied().collect()));
            cols.push(("d_z1".into(), d1.iter().copied().collect()));
        }
        write_columns(writer, &cols, significant_digits)
    }

    pub fn write_observed_csv_path(&self, path: &Path, significant_digits: Option<usize>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_observed_csv(std::io::BufWriter::new(f), significant_digits)
    }
}

fn write_columns<W: Write>(writer: W, cols: &[(String, Vec<f64>)], digits: Option<usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(cols.iter().map(|(n, _)| n.as_str()))?;
    let n = cols.first().map_or(0, |c| c.1.len());
    for i in 0..n {
        w.write_record(cols.iter().map(|(_, c)| format_number(c[i], digits)))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `E[Y^(d) | X = x, s = j, V_j = v]`: `x' beta1 + v^2` or `x' beta0 + v`.
pub fn true_mtr(config: &DgpConfig, group: usize, treated: bool, x: &[f64; 2], v: f64) -> f64 {
    let b = if treated { config.beta1[group] } else { config.beta0[group] };
    let lin = b[0] * x[0] + b[1] * x[1];
    if treated {
        lin + v * v
    } else {
        lin + v
    }
}

/// `x' (beta1_j - beta0_j) + v^2 - v`.
pub fn true_mte(config: &DgpConfig, group: usize, x: &[f64; 2], v: f64) -> f64 {
    true_mtr(config, group, true, x, v) - true_mtr(config, group, false, x, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_values() {
        let cfg = DgpConfig::default();
        assert!((true_mte(&cfg, 0, &[1.0, 0.5], 0.2) - 0.84).abs() < 1e-15);
        assert!((true_mte(&cfg, 1, &[1.0, 0.5], 0.5) - 0.25).abs() < 1e-15);
        for j in 0..2 {
            assert!((true_mte(&cfg, j, &[1.0, -0.3], 0.0) - true_mte(&cfg, j, &[1.0, -0.3], 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn defaults_are_the_design_values() {
        let cfg = DgpConfig::default();
        assert_eq!(cfg.pi, vec![0.35, 0.65]);
        assert_eq!(cfg.gamma, vec![[0.0, -0.5, 0.5], [0.0, 0.3, -0.7]]);
        assert_eq!(cfg.beta0, vec![[-1.0, 1.0], [1.0, 2.0]]);
        assert_eq!(cfg.beta1, vec![[1.0, -1.0], [2.0, 1.0]]);
        assert_eq!(cfg.noise_sd, 0.5);
        let parsed: DgpConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, cfg);
        assert!(serde_json::from_str::<DgpConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn latent_bookkeeping_is_exact() {
        for cfg in [DgpConfig { n: 500, ..DgpConfig::default() }, DgpConfig { n: 500, ..DgpConfig::binary_iv() }] {
            let sim = simulate(&cfg, 11).unwrap();
            for i in 0..sim.n() {
                let s = sim.s[i];
                let d = f64::from(u8::from(sim.p[(i, s)] >= sim.v[(i, s)]));
                assert_eq!(sim.d[i], d);
                assert_eq!(sim.y[i], sim.d[i] * sim.y1[i] + (1.0 - sim.d[i]) * sim.y0[i]);
            }
        }
    }

    #[test]
    fn moments_at_large_n() {
        let sim = simulate(&DgpConfig { n: 100_000, ..DgpConfig::default() }, 5).unwrap();
        let mean_d = sim.d.mean();
        let mean_v = (0..sim.n()).map(|i| sim.v[(i, sim.s[i])]).sum::<f64>() / sim.n() as f64;
        let share1 = sim.s.iter().filter(|s| **s == 0).count() as f64 / sim.n() as f64;
        assert!((mean_d - 0.5).abs() < 0.01, "{mean_d}");
        assert!((mean_v - 0.5).abs() < 0.01, "{mean_v}");
        assert!((share1 - 0.35).abs() < 0.01, "{share1}");
    }

    #[test]
    fn deterministic_and_stream_separated() {
        let cfg = DgpConfig { n: 50, ..DgpConfig::default() };
        assert_eq!(simulate(&cfg, 3).unwrap(), simulate(&cfg, 3).unwrap());
        let a = simulate_with(&cfg, &mut stream_rng(3, 1)).unwrap();
        let b = simulate_with(&cfg, &mut stream_rng(3, 2)).unwrap();
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn tiny_samples_simulate_but_may_not_estimate() {
        let cfg = DgpConfig { n: 1, ..DgpConfig::default() };
        let sim = simulate(&cfg, 0).unwrap();
        assert_eq!(sim.n(), 1);
        assert!(sim.dataset().is_err());
        assert!(simulate(&DgpConfig { n: 0, ..DgpConfig::default() }, 0).is_err());
    }

    #[test]
    fn dataset_layout() {
        let sim = simulate(&DgpConfig { n: 40, ..DgpConfig::default() }, 1).unwrap();
        let data = sim.dataset().unwrap();
        assert_eq!(data.x_names(), vec!["(intercept)", "x1"]);
        assert_eq!(data.z_names(1), vec!["(intercept)", "x1", "zeta2"]);
        let mut buf = Vec::new();
        sim.write_observed_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("y,d,x1,zeta1,zeta2\n"));
        assert_eq!(text.lines().count(), 41);
    }

    #[test]
    fn binary_design_compliers() {
        let sim = simulate(&DgpConfig { n: 20_000, ..DgpConfig::binary_iv() }, 2).unwrap();
        assert!(sim.instruments.iter().all(|z| *z == 0.0 || *z == 1.0));
        let (d0, d1) = sim.potential_treatments.as_ref().unwrap();
        assert!(d0.iter().zip(d1.iter()).all(|(a, b)| a <= b), "monotonicity");
        let (_, share) = sim.complier_late(0).unwrap();
        assert!(share > 0.95, "{share}");
        assert!(sim.binary_iv().is_ok());
        assert!(simulate(&DgpConfig { n: 10, ..DgpConfig::default() }, 0).unwrap().binary_iv().is_err());
    }
}
