//! Small numerical helpers shared across modules. Natural logarithms throughout.

/// Binary entropy `h(u) = -u ln u - (1-u) ln(1-u)` in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(u: f64) -> f64 {
    -xlogx(u) - xlogx(1.0 - u)
}

/// `u ln u` with the convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        u * u.ln()
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 35.0 {
        z
    } else if z < -35.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln(1 - e^z)` for `z < 0`.
#[inline]
pub fn log1m_exp(z: f64) -> f64 {
    debug_assert!(z < 0.0);
    if z > -std::f64::consts::LN_2 {
        (-z.exp_m1()).ln()
    } else {
        (-z.exp()).ln_1p()
    }
}

/// Logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ e^{v_i}`; `-inf` when every entry is `-inf` or the slice is empty.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place into probabilities. Returns the log
/// normalizer, `-inf` if every weight vanished (weights left untouched).
pub fn normalize_log_weights(log_weights: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp(log_weights);
    if lse.is_finite() {
        for (o, lw) in out.iter_mut().zip(log_weights) {
            *o = (lw - lse).exp();
        }
    }
    lse
}
