//! Dense matrices, a recording tape for reverse-mode gradients, and a
//! finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{analytic_gradient, grad_check, numeric_gradient, relative_error, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{BatchStats, GradientMap, Mode, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM, NORM_FLOOR};

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Sum that depends only on the multiset of values: sorts in place, then
/// adds in ascending order.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}
