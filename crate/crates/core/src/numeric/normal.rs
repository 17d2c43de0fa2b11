//! Standard normal distribution functions.
//!
//! The CDF is evaluated through the complementary error function
//! (`libm::erfc`, a port of the fdlibm/musl rational approximations with
//! sub-ulp error), so lower-tail probabilities keep full relative precision.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

const CDF_FLOOR: f64 = 1e-300;
const CDF_CEIL: f64 = 1.0 - 1e-16;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, clamped to `[1e-300, 1 - 1e-16]` in the tails.
pub fn normal_cdf(x: f64) -> f64 {
    let p = 0.5 * libm::erfc(-x * FRAC_1_SQRT_2);
    p.clamp(CDF_FLOOR, CDF_CEIL)
}

/// Inverse of the standard normal CDF.
///
/// A rational starting value (Abramowitz & Stegun 26.2.23) is refined with
/// Halley steps against [`normal_cdf`] on the lower tail, then reflected.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!(
            "normal quantile needs q in (0, 1), got {q}"
        )));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    let (tail, sign) = if q < 0.5 { (q, -1.0) } else { (1.0 - q, 1.0) };

    let t = (-2.0 * tail.ln()).sqrt();
    let num = 2.515517 + t * (0.802853 + t * 0.010328);
    let den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308));
    let mut x = -(t - num / den);

    for _ in 0..6 {
        let err = 0.5 * libm::erfc(-x * FRAC_1_SQRT_2) - tail;
        let u = err / normal_pdf(x);
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(sign * -x)
}

/// Inverse Mills ratio `phi(u) / Phi(u)`, stable for very negative `u`.
pub(crate) fn mills_ratio(u: f64) -> f64 {
    if u < -35.0 {
        // asymptotic expansion of phi/Phi as u -> -inf
        let u2 = u * u;
        -u / (1.0 - 1.0 / u2 + 3.0 / (u2 * u2))
    } else {
        normal_pdf(u) / (0.5 * libm::erfc(-u * FRAC_1_SQRT_2))
    }
}
