//! Scalar normal-distribution helpers used across the crate.
//!
//! The cumulative distribution uses the double-precision rational
//! approximation of West (2005); the quantile starts from the classic
//! Abramowitz-Stegun 26.2.23 approximation and polishes with Newton steps
//! against the accurate CDF, which brings the round-trip error down to
//! machine precision.

use std::f64::consts::PI;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Density of N(mu, sigma^2) at x.
pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Standard normal CDF, accurate to ~1e-15 relative over the useful range.
pub fn std_normal_cdf(x: f64) -> f64 {
    let z = x.abs();
    let p = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_475 {
            let horner = |coeffs: &[f64]| coeffs.iter().fold(0.0, |acc, &c| acc * z + c);
            let b = horner(&[
                3.526_249_659_989_11e-2,
                0.700_383_064_443_688,
                6.373_962_203_531_65,
                33.912_866_078_383,
                112.079_291_497_871,
                221.213_596_169_931,
                220.206_867_912_376,
            ]) * e;
            let c = horner(&[
                8.838_834_764_831_84e-2,
                1.755_667_163_182_64,
                16.064_177_579_207,
                86.780_732_202_946_1,
                296.564_248_779_674,
                637.333_633_378_831,
                793.826_512_519_948,
                440.413_735_824_752,
            ]);
            b / c
        } else {
            let b = z + 0.65;
            let b = z + 4.0 / b;
            let b = z + 3.0 / b;
            let b = z + 2.0 / b;
            let b = z + 1.0 / b;
            e / (b * SQRT_2PI)
        }
    };
    if x > 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// Standard normal quantile (inverse CDF) of p in (0, 1).
pub fn std_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1), got {p}");
    // Abramowitz-Stegun 26.2.23 start (|err| < 4.5e-4) ...
    let (pp, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
    let t = (-2.0 * pp.ln()).sqrt();
    let num = 2.515517 + t * (0.802853 + t * 0.010328);
    let den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308));
    let mut x = sign * (t - num / den);
    // ... then Newton against the accurate CDF.
    for _ in 0..4 {
        let f = std_normal_cdf(x) - p;
        let d = std_normal_pdf(x);
        if d <= 0.0 {
            break;
        }
        let step = f / d;
        x -= step;
        if step.abs() < 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    2.0 * (1.0 - std_normal_cdf(z.abs()))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by n).
pub fn population_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}
