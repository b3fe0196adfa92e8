//! Exponential integral `Ei(x) = ∫_{-∞}^{x} e^t/t dt` on the real line.
//!
//! Three branches:
//! - convergent power series `γ + ln|x| + Σ x^k/(k·k!)` for `-1 ≤ x ≤ 40`,
//! - asymptotic expansion `e^x/x · Σ k!/x^k`, truncated at its smallest
//!   term, for `x > 40`,
//! - continued fraction for `E1(-x)` (modified Lentz) for `x < -1`, using
//!   `Ei(x) = -E1(-x)`.
//!
//! The series alternates for negative arguments and loses roughly
//! `|x|/ln(10)` digits to cancellation, which is why it is not used below
//! `-1`.

use crate::error::{Error, Result};

/// Euler–Mascheroni constant, 20 significant digits.
#[allow(clippy::excessive_precision)]
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_860_61;

/// Upper end of the power-series branch for positive arguments.
pub const SERIES_MAX: f64 = 40.0;

/// Lower end of the power-series branch for negative arguments.
pub const SERIES_MIN: f64 = -1.0;

const EPS: f64 = 1e-17;
const MAX_ITER: usize = 1000;

/// Exponential integral `Ei(x)` for finite nonzero real `x`.
///
/// For `x > 0` the integral is a Cauchy principal value.
pub fn expint_ei(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("Ei({x}): argument must be finite")));
    }
    if x == 0.0 {
        return Err(Error::Domain("Ei(0): logarithmic singularity".into()));
    }
    let value = if x > SERIES_MAX {
        ei_asymptotic(x)
    } else if x >= SERIES_MIN {
        ei_series(x)
    } else {
        -e1_continued_fraction(-x)
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!("Ei({x}) overflows f64")));
    }
    Ok(value)
}

pub(crate) fn ei_series(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for k in 1..MAX_ITER {
        let kf = k as f64;
        term *= x / kf;
        let contrib = term / kf;
        sum += contrib;
        if kf > x.abs() && contrib.abs() <= EPS * sum.abs() {
            break;
        }
    }
    EULER_GAMMA + x.abs().ln() + sum
}

pub(crate) fn ei_asymptotic(x: f64) -> f64 {
    let mut term: f64 = 1.0;
    let mut sum: f64 = 1.0;
    for k in 1..MAX_ITER {
        let next = term * k as f64 / x;
        if next.abs() >= term.abs() || next.abs() < EPS * sum.abs() {
            break;
        }
        term = next;
        sum += term;
    }
    x.exp() / x * sum
}

/// `E1(a)` for `a > 0` by continued fraction; converges quickly for `a ≥ 1`.
pub(crate) fn e1_continued_fraction(a: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = a + 1.0;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-a).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    // Reference values below were computed with 40-digit arithmetic.
    #[test]
    fn known_values() {
        assert!(rel(expint_ei(1.0).unwrap(), 1.895_117_816_355_936_755_466_521) < 1e-14);
        let x = -2.0 * 2.6f64.ln();
        assert!(rel(expint_ei(x).unwrap(), -0.055_343_906_604_604_373_034_725_71) < 1e-13);
        assert!(rel(expint_ei(10.0).unwrap(), 2_492.228_976_241_877_759_138_44) < 1e-14);
        assert!(rel(expint_ei(-10.0).unwrap(), -4.156_968_929_685_324_277_402_86e-6) < 1e-13);
        assert!(rel(expint_ei(40.0).unwrap(), 6_039_718_263_611_241.578_359_231) < 1e-14);
        assert!(rel(expint_ei(-50.0).unwrap(), -3.783_264_029_550_459_018_698_968e-24) < 1e-13);
        assert!(rel(expint_ei(1e-6).unwrap(), -13.238_293_893_062_491_243_445_88) < 1e-14);
    }

    #[test]
    fn decays_for_large_negative_arguments() {
        assert!(expint_ei(-50.0).unwrap().abs() < 1e-20);
    }

    #[test]
    fn rejects_zero_and_non_finite() {
        assert!(matches!(expint_ei(0.0), Err(Error::Domain(_))));
        assert!(matches!(expint_ei(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(expint_ei(f64::NEG_INFINITY), Err(Error::Domain(_))));
        assert!(matches!(expint_ei(800.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn branches_agree_at_switch_points() {
        let a = ei_series(SERIES_MAX);
        let b = ei_asymptotic(SERIES_MAX);
        assert!(rel(a, b) < 1e-12, "{a} vs {b}");
        let a = ei_series(SERIES_MIN);
        let b = -e1_continued_fraction(-SERIES_MIN);
        assert!(rel(a, b) < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn decreasing_on_negative_axis() {
        let mut prev = expint_ei(-50.0).unwrap();
        let mut x = -50.0;
        while x < -0.01 {
            x += 0.01;
            let v = expint_ei(x).unwrap();
            assert!(v < prev, "not decreasing at {x}");
            prev = v;
        }
    }
}
