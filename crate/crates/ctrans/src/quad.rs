//! Composite Simpson quadrature on uniform grids.
//!
//! Every integral in the crate is evaluated on the shared flow grid with the
//! same composite Simpson rule, so quantities defined through integrals (the
//! Gramian, endpoint maps, control actions) stay mutually consistent to
//! round-off rather than merely to quadrature accuracy.

use crate::error::{Error, Result};

/// Weights of the composite Simpson rule on `intervals + 1` uniform nodes
/// spanning a step `h`, i.e. `h/3 * [1, 4, 2, 4, ..., 2, 4, 1]`.
///
/// `intervals` must be even and at least 2.
pub fn simpson_weights(intervals: usize, h: f64) -> Result<Vec<f64>> {
    if intervals < 2 || intervals % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "Simpson rule needs an even number of intervals >= 2, got {intervals}"
        )));
    }
    let mut w = vec![0.0; intervals + 1];
    let third = h / 3.0;
    w[0] = third;
    w[intervals] = third;
    for (k, wk) in w.iter_mut().enumerate().take(intervals).skip(1) {
        *wk = if k % 2 == 1 { 4.0 * third } else { 2.0 * third };
    }
    Ok(w)
}

/// Integral of uniformly sampled scalar values by composite Simpson.
pub fn simpson(values: &[f64], h: f64) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "Simpson rule needs at least 3 samples, got {}",
            values.len()
        )));
    }
    let weights = simpson_weights(values.len() - 1, h)?;
    Ok(values.iter().zip(&weights).map(|(v, w)| v * w).sum())
}

/// Integral over one interval `[a, a+h]` from endpoint and midpoint samples:
/// the three-node Simpson rule `h/6 * (f(a) + 4 f(a+h/2) + f(a+h))`.
pub fn simpson_interval<T>(left: T, mid: T, right: T, h: f64) -> T
where
    T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    (left + mid * 4.0 + right) * (h / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_interval_length() {
        let w = simpson_weights(10, 0.1).unwrap();
        let total: f64 = w.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_on_cubics() {
        // Simpson integrates polynomials of degree <= 3 exactly.
        let n = 8usize;
        let h = 2.0 / n as f64;
        let values: Vec<f64> = (0..=n)
            .map(|k| {
                let t = k as f64 * h;
                3.0 * t * t * t - t * t + 5.0
            })
            .collect();
        // ∫₀² 3t³ − t² + 5 dt = 12 − 8/3 + 10
        assert_abs_diff_eq!(
            simpson(&values, h).unwrap(),
            12.0 - 8.0 / 3.0 + 10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fourth_order_convergence() {
        let integral = |n: usize| {
            let h = 1.0 / n as f64;
            let values: Vec<f64> = (0..=n).map(|k| (k as f64 * h).exp()).collect();
            simpson(&values, h).unwrap()
        };
        let exact = 1f64.exp() - 1.0;
        let e1 = (integral(8) - exact).abs();
        let e2 = (integral(16) - exact).abs();
        assert!(e1 / e2 > 12.0, "Simpson error ratio {} below order 4", e1 / e2);
    }

    #[test]
    fn odd_interval_count_rejected() {
        assert!(simpson_weights(5, 0.1).is_err());
        assert!(simpson_weights(0, 0.1).is_err());
    }

    #[test]
    fn interval_rule_matches_composite() {
        // One Simpson interval == composite rule with two half-steps.
        let f = |t: f64| t.sin();
        let h = 0.3;
        let a = 0.2;
        let one = simpson_interval(f(a), f(a + 0.5 * h), f(a + h), h);
        let composite = simpson(&[f(a), f(a + 0.5 * h), f(a + h)], 0.5 * h).unwrap();
        assert_abs_diff_eq!(one, composite, epsilon = 1e-15);
    }
}
