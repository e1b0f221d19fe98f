/// Error decomposition of replicated estimates.
///
/// `variance` is the population variance of the errors, so
/// `mse = bias_sq + variance` up to rounding. The interval uses the sample
/// standard deviation of the estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean_estimate: f64,
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Summarises estimates against per-replication true values.
///
/// Panics if the slices differ in length or are empty.
pub fn summarize(estimates: &[f64], true_values: &[f64]) -> Stats {
    assert_eq!(estimates.len(), true_values.len());
    assert!(!estimates.is_empty(), "no estimates to summarise");
    let n = estimates.len() as f64;
    let errors: Vec<f64> = estimates.iter().zip(true_values).map(|(e, v)| e - v).collect();
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let bias = errors.iter().sum::<f64>() / n;
    let variance = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / n;
    let mean_estimate = estimates.iter().sum::<f64>() / n;
    let sd = if estimates.len() > 1 {
        (estimates.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / n.sqrt();
    Stats {
        mean_estimate,
        mse,
        bias_sq: bias * bias,
        variance,
        ci_low: mean_estimate - half,
        ci_high: mean_estimate + half,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn two_point_example() {
        let s = summarize(&[1.0, 3.0], &[2.0, 2.0]);
        assert_eq!((s.mse, s.bias_sq, s.variance), (1.0, 0.0, 1.0));
        assert_relative_eq!(s.ci_high - s.ci_low, 2.0 * 1.96 * 2f64.sqrt() / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn constant_estimator_has_no_variance() {
        let s = summarize(&[4.5; 7], &[2.0; 7]);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.bias_sq, 6.25);
        assert_eq!((s.ci_low, s.ci_high), (4.5, 4.5));
    }

    proptest! {
        #[test]
        fn decomposition_identity(est in prop::collection::vec(-100.0f64..100.0, 2..50), v in -10.0f64..10.0) {
            let truth = vec![v; est.len()];
            let s = summarize(&est, &truth);
            prop_assert!((s.mse - s.bias_sq - s.variance).abs() <= 1e-9 * s.mse.max(1.0));
            prop_assert!(s.ci_low <= s.ci_high);
            prop_assert!(s.variance >= 0.0);
        }
    }
}
