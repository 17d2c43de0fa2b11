//! Clamped B-spline bases on `[0, 1]` with equally spaced interior knots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Basis specification. `order` is degree + 1 (order 3 = quadratic pieces).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBasisSpec", deny_unknown_fields)]
pub struct BasisSpec {
    order: usize,
    inner_knots: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBasisSpec {
    order: usize,
    inner_knots: usize,
}

impl TryFrom<RawBasisSpec> for BasisSpec {
    type Error = Error;

    fn try_from(raw: RawBasisSpec) -> Result<Self> {
        BasisSpec::new(raw.order, raw.inner_knots)
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            order: 3,
            inner_knots: 1,
        }
    }
}

impl BasisSpec {
    pub fn new(order: usize, inner_knots: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::invalid(format!(
                "spline order must be at least 2, got {order}"
            )));
        }
        Ok(Self { order, inner_knots })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn inner_knots(&self) -> usize {
        self.inner_knots
    }

    /// Number of basis functions, `order + inner_knots`.
    pub fn dim(&self) -> usize {
        self.order + self.inner_knots
    }

    /// Interior knot locations `i / (inner_knots + 1)`.
    pub fn interior_knots(&self) -> Vec<f64> {
        let m = self.inner_knots + 1;
        (1..m).map(|i| i as f64 / m as f64).collect()
    }

    /// Full clamped knot vector of length `2 * order + inner_knots`.
    pub fn knots(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.order];
        t.extend(self.interior_knots());
        t.extend(std::iter::repeat_n(1.0, self.order));
        t
    }

    /// Basis values `b_K(p)`.
    pub fn evaluate(&self, p: f64) -> Result<Vec<f64>> {
        check_unit(p)?;
        Ok(self.table(p, self.order - 1))
    }

    /// Derivatives `d b_K(p) / dp`; at `p = 1` this is the left derivative.
    pub fn derivative(&self, p: f64) -> Result<Vec<f64>> {
        check_unit(p)?;
        let degree = self.order - 1;
        let lower = self.table(p, degree - 1);
        let t = self.knots();
        let deg = degree as f64;
        let out = (0..self.dim())
            .map(|i| {
                let left = ratio(lower[i], t[i + degree] - t[i]);
                let right = ratio(lower[i + 1], t[i + degree + 1] - t[i + 1]);
                deg * (left - right)
            })
            .collect();
        Ok(out)
    }

    /// Cox-de Boor triangle up to `degree` over the whole knot vector.
    fn table(&self, p: f64, degree: usize) -> Vec<f64> {
        let t = self.knots();
        let n_intervals = t.len() - 1;
        // the last non-degenerate interval is closed on the right
        let last_span = t.len() - self.order - 1;
        let mut n: Vec<f64> = (0..n_intervals)
            .map(|i| {
                let inside = (t[i] <= p && p < t[i + 1]) || (p == 1.0 && i == last_span);
                if inside {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for d in 1..=degree {
            n = (0..n.len() - 1)
                .map(|i| {
                    let a = ratio((p - t[i]) * n[i], t[i + d] - t[i]);
                    let b = ratio((t[i + d + 1] - p) * n[i + 1], t[i + d + 1] - t[i + 1]);
                    a + b
                })
                .collect();
        }
        n
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn check_unit(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "spline argument must lie in [0, 1], got {p}"
        )))
    }
}

/// `b_K(p)` for `spec`.
pub fn bspline_basis(p: f64, spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.evaluate(p)
}

/// `d b_K(p) / dp` for `spec`.
pub fn bspline_deriv(p: f64, spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.derivative(p)
}
