//! Scalar special functions shared by the kernel, losses and metrics.
//!
//! Gamma-family functions and the regularized incomplete beta come from
//! `statrs`; the Student-t quantile is inverted here by bisection on the CDF
//! so interval construction does not depend on any distribution object.

use crate::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// Error function via the regularized lower incomplete gamma
/// `erf(|x|) = P(1/2, x^2)`, accurate to ~1 ulp (the direct rational
/// approximation is only good to ~1e-11).
pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let p = statrs::function::gamma::gamma_lr(0.5, x * x);
    if x > 0.0 {
        p
    } else {
        -p
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Standard normal quantile by bisection on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    invert_cdf(p, normal_cdf)
}

/// CDF of the standard Student-t distribution with `df` degrees of freedom,
/// expressed through the regularized incomplete beta function.
pub fn student_t_cdf(x: f64, df: f64) -> f64 {
    debug_assert!(df > 0.0);
    if x == 0.0 {
        return 0.5;
    }
    let ib = statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + x * x));
    if x > 0.0 {
        1.0 - 0.5 * ib
    } else {
        0.5 * ib
    }
}

/// Density of a location-scale Student-t, in log space.
pub fn student_t_ln_pdf(x: f64, df: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - scale.ln()
        - (df + 1.0) / 2.0 * (1.0 + z * z / df).ln()
}

/// Quantile of the standard Student-t distribution, inverted from
/// [`student_t_cdf`] by bisection to ~1e-9.
pub fn student_t_quantile(p: f64, df: f64) -> Result<f64> {
    if df <= 0.0 {
        return Err(Error::Degenerate(format!(
            "student-t degrees of freedom must be positive, got {df}"
        )));
    }
    invert_cdf(p, |x| student_t_cdf(x, df))
}

/// Bisection inversion of a continuous, strictly increasing, symmetric CDF.
fn invert_cdf(p: f64, cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || p == 0.0 {
        return Err(Error::Contract(format!(
            "quantile probability must lie in (0, 1), got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve for the upper tail and mirror.
    let target = if p > 0.5 { p } else { 1.0 - p };
    let mut hi = 1.0;
    while cdf(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Degenerate(format!(
                "quantile bracket exceeded 1e12 for p={p}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.abs().max(1.0) {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    Ok(if p > 0.5 { x } else { -x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digamma_at_one_is_negative_euler_gamma() {
        assert!((digamma(1.0) + 0.577_215_664_901_532_86).abs() < 1e-10);
    }

    #[test]
    fn normal_cdf_matches_tables() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((normal_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-8);
    }

    #[test]
    fn t_quantiles_match_standard_tables() {
        // Two-sided 95% critical values.
        let cases = [
            (1.0, 12.7062),
            (2.0, 4.30265),
            (4.0, 2.77645),
            (9.0, 2.26216),
            (30.0, 2.04227),
        ];
        for (df, expected) in cases {
            let q = student_t_quantile(0.975, df).unwrap();
            assert!(
                (q - expected).abs() < 5e-4,
                "df={df}: got {q}, expected {expected}"
            );
        }
        // Symmetry and median.
        assert_eq!(student_t_quantile(0.5, 7.0).unwrap(), 0.0);
        let a = student_t_quantile(0.1, 5.0).unwrap();
        let b = student_t_quantile(0.9, 5.0).unwrap();
        assert!((a + b).abs() < 1e-9);
    }

    #[test]
    fn t_cdf_round_trips_through_quantile() {
        for &df in &[1.5, 3.0, 8.0, 40.0] {
            for &p in &[0.01, 0.2, 0.6, 0.99] {
                let x = student_t_quantile(p, df).unwrap();
                assert!((student_t_cdf(x, df) - p).abs() < 1e-9, "df={df} p={p}");
            }
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &x in &[-20.0, -3.0, 0.0, 0.5, 4.0, 30.0] {
            let y = softplus(x);
            assert!((softplus_inv(y) - x).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn t_ln_pdf_spot_value() {
        // t with df=4 at 0: density 0.375
        let lp = student_t_ln_pdf(0.0, 4.0, 0.0, 1.0);
        assert!((lp.exp() - 0.375).abs() < 1e-12);
    }
}
