//! Standard-normal helpers shared by the tape and the mixture density code.

use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

/// `0.5 * ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn log_normal_pdf_std(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

/// Standard normal CDF.
pub fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, accurate in both tails.
pub fn log_ndtr(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -30.0 {
        (0.5 * erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        // asymptotic Mills-ratio expansion
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
        log_normal_pdf_std(x) - (-x).ln() + series.ln()
    }
}

/// Inverse of the standard normal CDF for `p` in `(0, 1)`.
pub fn ndtri(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}
