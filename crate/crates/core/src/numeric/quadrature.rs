//! Composite Gauss-Legendre quadrature.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("quadrature needs at least one node"));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integral of `f` over `[a, b]` with a single panel.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Integral over `[a, b]` split at `breakpoints` (sorted, within `[a, b]`).
    pub fn integrate_panels<F: Fn(f64) -> f64>(
        &self,
        f: &F,
        a: f64,
        b: f64,
        breakpoints: &[f64],
    ) -> Result<f64> {
        if !(a < b) {
            return Err(Error::invalid(format!(
                "integration bounds must satisfy a < b, got [{a}, {b}]"
            )));
        }
        if breakpoints.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("breakpoints must be sorted"));
        }
        if breakpoints.iter().any(|t| !(a..=b).contains(t)) {
            return Err(Error::invalid("breakpoints must lie within [a, b]"));
        }
        let mut total = 0.0;
        let mut lo = a;
        for &hi in breakpoints.iter().chain(std::iter::once(&b)) {
            if hi > lo {
                total += self.integrate(f, lo, hi);
            }
            lo = hi;
        }
        Ok(total)
    }
}

/// `(P_n(x), P_n'(x))` from the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite `nodes_per_interval`-point Gauss-Legendre integral of `f` on `[a, b]`.
pub fn gauss_legendre_integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    nodes_per_interval: usize,
    breakpoints: &[f64],
) -> Result<f64> {
    GaussLegendre::new(nodes_per_interval)?.integrate_panels(&f, a, b, breakpoints)
}
