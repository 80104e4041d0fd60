// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sign-preserving soft floor for signed normalizers.

/// `sign(Σr) * max(|Σr|, beta * Σ|r|)`, with `sign(0) = +1`.
///
/// An all-zero input returns 0; callers treat that as "no shares".
pub fn safe_denom(values: &[f64], beta: f64) -> f64 {
    let (sum, abs) = values
        .iter()
        .fold((0.0, 0.0), |(s, a), &v| (s + v, a + v.abs()));
    safe_denom_from_sums(sum, abs, beta)
}

/// [`safe_denom`] from a precomputed signed sum and absolute mass.
pub fn safe_denom_from_sums(sum: f64, abs: f64, beta: f64) -> f64 {
    if abs == 0.0 {
        return 0.0;
    }
    let sign = if sum < 0.0 { -1.0 } else { 1.0 };
    sign * sum.abs().max(beta * abs)
}

/// Whether the floor replaces the plain sum.
pub fn floor_active(sum: f64, abs: f64, beta: f64) -> bool {
    abs > 0.0 && sum.abs() < beta * abs
}

/// `r_i / safe_denom(r)`; all zeros when the denominator is 0.
pub fn shares(values: &[f64], beta: f64) -> Vec<f64> {
    let den = safe_denom(values, beta);
    if den == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / den).collect()
}
