//! Log-space arithmetic shared by every module.
//!
//! Partition functions here are routinely `e^{Θ(n)}`, so nothing outside
//! this file ever holds a raw `Z`.

use std::f64::consts::{LN_2, PI};

/// `log Σ exp(x_i)`; returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut acc = LogSumExp::new();
    for &x in xs {
        acc.push(x);
    }
    acc.value()
}

/// Streaming log-sum-exp with a running maximum.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    /// Combine with another accumulator. Order matters at the last ulp, so
    /// callers that need bitwise determinism merge in a fixed order.
    pub fn merge(&mut self, other: &LogSumExp) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if self.max == f64::NEG_INFINITY {
            *self = *other;
            return;
        }
        if other.max <= self.max {
            self.sum += other.sum * (other.max - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Overflow-safe `log cosh x`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// `1 / (1 + e^{-x})` without overflow in either tail.
///
/// The negative half is computed as `1 − logistic(−x)`, which is exact in
/// floating point, so `logistic(x) + logistic(−x) == 1.0` always holds.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        1.0 - 1.0 / (1.0 + x.exp())
    }
}

/// `log(e^{x²} erfc(x))` for `x ≥ 0`.
pub fn log_erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 10.0 {
        x * x + libm::erfc(x).ln()
    } else {
        // Continued fraction: erfcx(x) = 1/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))).
        let mut tail = x;
        for k in (1..=60).rev() {
            tail = x + (k as f64 / 2.0) / tail;
        }
        -0.5 * PI.ln() - tail.ln()
    }
}

fn erfcx(x: f64) -> f64 {
    log_erfcx(x).exp()
}

/// `log ∫_{lo}^{hi} exp(a·(y − center) − (n/2)·y²) dy` for a finite
/// interval `lo < hi` and `n > 0`.
///
/// The integrand is a Gaussian centered at `a/n`; the integral is written
/// relative to the largest value of the exponent on the interval, so it
/// stays finite for `|a|` far beyond the range where `erf` differences
/// cancel.
pub fn log_tilted_gaussian_interval(a: f64, center: f64, lo: f64, hi: f64, n: f64) -> f64 {
    debug_assert!(hi > lo && n > 0.0);
    let exponent = |y: f64| a * (y - center) - 0.5 * n * y * y;
    let m = a / n;
    let s = (0.5 * n).sqrt();
    let scale = 0.5 * PI.ln() - LN_2 - s.ln();
    if m >= hi {
        let near = s * (m - hi);
        let far = s * (m - lo);
        let gap = (far - near) * (far + near);
        exponent(hi) + scale + log_erfcx(near) + (-(erfcx(far) / erfcx(near)) * (-gap).exp()).ln_1p()
    } else if m <= lo {
        let near = s * (lo - m);
        let far = s * (hi - m);
        let gap = (far - near) * (far + near);
        exponent(lo) + scale + log_erfcx(near) + (-(erfcx(far) / erfcx(near)) * (-gap).exp()).ln_1p()
    } else {
        exponent(m) + scale + (libm::erf(s * (hi - m)) + libm::erf(s * (m - lo))).ln()
    }
}
