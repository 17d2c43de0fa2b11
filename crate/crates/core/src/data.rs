//! Observed data: outcome, binary treatment, covariates and the per-group
//! instrument blocks.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name used for auto-prepended constant columns.
pub const INTERCEPT: &str = "(intercept)";

fn yes() -> bool {
    true
}

/// Columns entering one group's choice index `Z_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentBlock {
    pub columns: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
}

impl InstrumentBlock {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            intercept: true,
        }
    }
}

/// Per-group instrument specification. Group `j` is whatever block sits at
/// index `j`; the optimizer never relabels groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub groups: Vec<InstrumentBlock>,
}

impl GroupSpec {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Maps CSV columns to the outcome, the treatment and the covariates `X`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default = "yes")]
    pub covariate_intercept: bool,
}

/// A group whose instrument list has no exclusive column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionViolation {
    pub group: usize,
    pub message: String,
}

/// Reports every group lacking a column that appears neither in `X` nor in
/// any other group's instruments. Vacuous for a single group.
pub fn validate_exclusions(spec: &GroupSpec, covariate_names: &[String]) -> Vec<ExclusionViolation> {
    if spec.n_groups() <= 1 {
        return Vec::new();
    }
    let covs: BTreeSet<&str> = covariate_names.iter().map(String::as_str).collect();
    spec.groups
        .iter()
        .enumerate()
        .filter_map(|(j, block)| {
            let exclusive = block.columns.iter().any(|c| {
                !covs.contains(c.as_str())
                    && spec
                        .groups
                        .iter()
                        .enumerate()
                        .all(|(h, other)| h == j || !other.columns.contains(c))
            });
            (!exclusive).then(|| ExclusionViolation {
                group: j,
                message: format!(
                    "group {j} has no instrument excluded from X and from the other groups ({:?})",
                    block.columns
                ),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    d: DVector<f64>,
    x: DMatrix<f64>,
    z_blocks: Vec<DMatrix<f64>>,
    roles: ColumnRoles,
    groups: GroupSpec,
}

impl Dataset {
    /// Builds a dataset from a table of named numeric columns.
    pub fn from_columns(
        columns: &HashMap<String, Vec<f64>>,
        roles: &ColumnRoles,
        groups: &GroupSpec,
    ) -> Result<Self> {
        let get = |name: &str| {
            columns
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
        };
        let y = get(&roles.outcome)?;
        let n = y.len();
        let d = get(&roles.treatment)?;
        let block = |names: &[String], intercept: bool| -> Result<DMatrix<f64>> {
            let cols: Vec<&Vec<f64>> = names.iter().map(|c| get(c)).collect::<Result<_>>()?;
            let off = usize::from(intercept);
            let mut m = DMatrix::zeros(n, cols.len() + off);
            for i in 0..n {
                if intercept {
                    m[(i, 0)] = 1.0;
                }
                for (k, c) in cols.iter().enumerate() {
                    if c.len() != n {
                        return Err(Error::Data("columns have unequal lengths".into()));
                    }
                    m[(i, k + off)] = c[i];
                }
            }
            Ok(m)
        };
        let x = block(&roles.covariates, roles.covariate_intercept)?;
        let z_blocks = groups
            .groups
            .iter()
            .map(|g| block(&g.columns, g.intercept))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            DVector::from_vec(y.clone()),
            DVector::from_vec(d.clone()),
            x,
            z_blocks,
            roles.clone(),
            groups.clone(),
        )
    }

    /// Validating constructor. `x` and `z_blocks` must already contain any
    /// intercept columns that `roles` / `groups` declare.
    pub fn new(
        y: DVector<f64>,
        d: DVector<f64>,
        x: DMatrix<f64>,
        z_blocks: Vec<DMatrix<f64>>,
        roles: ColumnRoles,
        groups: GroupSpec,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no observations".into()));
        }
        if groups.n_groups() == 0 || groups.n_groups() != z_blocks.len() {
            return Err(Error::Data("need one instrument block per group (S >= 1)".into()));
        }
        if d.len() != n || x.nrows() != n || z_blocks.iter().any(|z| z.nrows() != n) {
            return Err(Error::Data("inputs have inconsistent row counts".into()));
        }
        let expect_x = roles.covariates.len() + usize::from(roles.covariate_intercept);
        if x.ncols() != expect_x || x.ncols() == 0 {
            return Err(Error::Data("covariate matrix does not match the column roles".into()));
        }
        for (j, (z, g)) in z_blocks.iter().zip(&groups.groups).enumerate() {
            if z.ncols() != g.columns.len() + usize::from(g.intercept) || z.ncols() == 0 {
                return Err(Error::Data(format!(
                    "instrument block {j} does not match the group spec"
                )));
            }
        }
        let check = |m: &DMatrix<f64>, what: &str| {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                let (row, col) = (pos % m.nrows(), pos / m.nrows());
                return Err(Error::Data(format!(
                    "non-finite {what} value at row {}, column {col}",
                    row + 1
                )));
            }
            Ok(())
        };
        check(&DMatrix::from_column_slice(n, 1, y.as_slice()), "outcome")?;
        check(&x, "covariate")?;
        for z in &z_blocks {
            check(z, "instrument")?;
        }
        if let Some(i) = d.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::DataCell {
                row: i + 1,
                column: roles.treatment.clone(),
                message: format!("treatment must be 0 or 1, got {}", d[i]),
            });
        }
        let treated = d.iter().filter(|v| **v == 1.0).count();
        if treated == 0 || treated == n {
            return Err(Error::Data(
                "both treatment arms must be non-empty".into(),
            ));
        }
        Ok(Self {
            y,
            d,
            x,
            z_blocks,
            roles,
            groups,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_groups(&self) -> usize {
        self.z_blocks.len()
    }

    pub fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self, group: usize) -> &DMatrix<f64> {
        &self.z_blocks[group]
    }

    pub fn z_blocks(&self) -> &[DMatrix<f64>] {
        &self.z_blocks
    }

    pub fn roles(&self) -> &ColumnRoles {
        &self.roles
    }

    pub fn groups(&self) -> &GroupSpec {
        &self.groups
    }

    /// Names of the columns of `X`, including the intercept if present.
    pub fn x_names(&self) -> Vec<String> {
        with_intercept(&self.roles.covariates, self.roles.covariate_intercept)
    }

    pub fn z_names(&self, group: usize) -> Vec<String> {
        let g = &self.groups.groups[group];
        with_intercept(&g.columns, g.intercept)
    }

    /// Column means of `X`.
    pub fn x_mean(&self) -> DVector<f64> {
        self.x.row_mean().transpose()
    }

    /// Each row repeated `times` times in place (row order `0,0,1,1,...`).
    pub fn repeat_rows(&self, times: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.n()).flat_map(|i| std::iter::repeat_n(i, times)).collect();
        self.select_rows(&idx)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            d: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.d[i])),
            x: self.x.select_rows(idx),
            z_blocks: self.z_blocks.iter().map(|z| z.select_rows(idx)).collect(),
            roles: self.roles.clone(),
            groups: self.groups.clone(),
        }
    }

    /// The groups reordered so that new group `k` is old group `perm[k]`.
    pub fn permute_groups(&self, perm: &[usize]) -> Result<Dataset> {
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if seen != (0..self.n_groups()).collect::<Vec<_>>() {
            return Err(Error::invalid("not a permutation of the groups"));
        }
        Ok(Dataset {
            z_blocks: perm.iter().map(|&j| self.z_blocks[j].clone()).collect(),
            groups: GroupSpec {
                groups: perm.iter().map(|&j| self.groups.groups[j].clone()).collect(),
            },
            ..self.clone()
        })
    }

    /// Distinct named columns in write order: outcome, treatment,
    /// covariates, then instruments not already written.
    fn named_columns(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = vec![
            (self.roles.outcome.clone(), self.y.iter().copied().collect()),
            (self.roles.treatment.clone(), self.d.iter().copied().collect()),
        ];
        let off = usize::from(self.roles.covariate_intercept);
        for (k, name) in self.roles.covariates.iter().enumerate() {
            out.push((name.clone(), self.x.column(k + off).iter().copied().collect()));
        }
        for (z, g) in self.z_blocks.iter().zip(&self.groups.groups) {
            let off = usize::from(g.intercept);
            for (k, name) in g.columns.iter().enumerate() {
                if out.iter().all(|(n, _)| n != name) {
                    out.push((name.clone(), z.column(k + off).iter().copied().collect()));
                }
            }
        }
        out
    }

    /// Writes the observed columns. `significant_digits = None` writes the
    /// shortest round-trip representation.
    pub fn write_csv<W: Write>(&self, writer: W, significant_digits: Option<usize>) -> Result<()> {
        let cols = self.named_columns();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(cols.iter().map(|(n, _)| n.as_str()))?;
        for i in 0..self.n() {
            w.write_record(cols.iter().map(|(_, c)| format_number(c[i], significant_digits)))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path, significant_digits: Option<usize>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f), significant_digits)
    }
}

fn with_intercept(names: &[String], intercept: bool) -> Vec<String> {
    let mut out = Vec::with_capacity(names.len() + 1);
    if intercept {
        out.push(INTERCEPT.to_string());
    }
    out.extend(names.iter().cloned());
    out
}

/// Fixed-precision number formatting shared by every CSV writer.
pub fn format_number(v: f64, significant_digits: Option<usize>) -> String {
    match significant_digits {
        None => format!("{v}"),
        Some(_) if v == 0.0 => "0".to_string(),
        Some(digits) => format!("{:.*e}", digits.saturating_sub(1), v),
    }
}

/// Reads a header-first CSV into named numeric columns. Only the columns in
/// `wanted` are parsed; blank or non-numeric cells are reported with their
/// coordinates.
pub fn read_numeric_columns<R: Read>(
    reader: R,
    wanted: &BTreeSet<String>,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = Vec::new();
    for name in wanted {
        let pos = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))?;
        index.push((name.clone(), pos));
    }
    let mut out: HashMap<String, Vec<f64>> =
        wanted.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (name, pos) in &index {
            let cell = rec.get(*pos).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(Error::DataCell {
                    row: r + 1,
                    column: name.clone(),
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::DataCell {
                row: r + 1,
                column: name.clone(),
                message: format!("not a number: `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::DataCell {
                    row: r + 1,
                    column: name.clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            out.get_mut(name).expect("column registered").push(v);
        }
    }
    Ok(out)
}

/// Loads and validates a dataset from CSV text.
pub fn load_csv_reader<R: Read>(reader: R, spec: &GroupSpec, roles: &ColumnRoles) -> Result<Dataset> {
    let mut wanted: BTreeSet<String> = BTreeSet::new();
    wanted.insert(roles.outcome.clone());
    wanted.insert(roles.treatment.clone());
    wanted.extend(roles.covariates.iter().cloned());
    for g in &spec.groups {
        wanted.extend(g.columns.iter().cloned());
    }
    let cols = read_numeric_columns(reader, &wanted)?;
    Dataset::from_columns(&cols, roles, spec)
}

/// Loads and validates a dataset from a CSV file.
pub fn load_csv(path: &Path, spec: &GroupSpec, roles: &ColumnRoles) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_reader(std::io::BufReader::new(f), spec, roles)
}
