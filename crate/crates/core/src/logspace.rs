//! Log-space helpers. `-inf` stands for probability zero; nothing here
//! produces NaN from finite or `-inf` inputs.

pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `ln(p)` with `ln(0) = -inf`.
#[inline]
pub fn ln(p: f64) -> f64 {
    if p <= 0.0 {
        LOG_ZERO
    } else {
        p.ln()
    }
}

/// Sum in log space. Multiplying by zero stays zero.
#[inline]
pub fn log_mul(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO || b == LOG_ZERO {
        LOG_ZERO
    } else {
        a + b
    }
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Log-sum-exp over a slice; the empty sum is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
