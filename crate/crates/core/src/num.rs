/// Neumaier-compensated sum. Loss reductions use it so that central
/// differences of a mean loss are not swamped by summation rounding.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn compensated_mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// `x^p` and its derivative `p x^(p-1)`; integer exponents use `powi`.
#[inline]
pub(crate) fn pow_with_derivative(x: f64, p: f64) -> (f64, f64) {
    if p == 0.0 {
        return (1.0, 0.0);
    }
    if p == 1.0 {
        return (x, 1.0);
    }
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        let n = p as i32;
        (x.powi(n), p * x.powi(n - 1))
    } else {
        (x.powf(p), p * x.powf(p - 1.0))
    }
}

#[inline]
pub(crate) fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
