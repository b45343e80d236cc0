//! Paired significance testing for seed-matched experiment comparisons.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CoreError, Result};

/// Result of a paired one-tailed t-test on per-seed differences, testing
/// whether the mean difference is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    /// One-tailed p-value for the alternative `mean > 0`.
    pub p: f64,
    pub mean_diff: f64,
    pub df: f64,
    /// Set when the differences have zero sample variance, where the t
    /// statistic is undefined and the p-value degenerates to 0, 1, or 1/2
    /// by the sign of the mean.
    pub degenerate: bool,
}

/// Tests `mean(diffs) > 0` with Student's t on `n - 1` degrees of freedom.
/// Pass differences of paired measurements (same seed, two treatments).
pub fn paired_one_tailed_t(diffs: &[f64]) -> Result<TTest> {
    let n = diffs.len();
    if n < 2 {
        return Err(CoreError::config(format!(
            "a paired test needs at least 2 differences, got {n}"
        )));
    }
    if let Some(idx) = diffs.iter().position(|d| !d.is_finite()) {
        return Err(CoreError::Numeric {
            index: idx,
            reason: format!("difference {} is not finite", diffs[idx]),
        });
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;

    if var == 0.0 {
        let (t, p) = match mean.partial_cmp(&0.0).expect("mean checked finite") {
            std::cmp::Ordering::Greater => (f64::INFINITY, 0.0),
            std::cmp::Ordering::Less => (f64::NEG_INFINITY, 1.0),
            std::cmp::Ordering::Equal => (0.0, 0.5),
        };
        return Ok(TTest { t, p, mean_diff: mean, df, degenerate: true });
    }

    let t = mean / (var.sqrt() / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| CoreError::Numeric {
        index: 0,
        reason: format!("t distribution with {df} degrees of freedom: {e}"),
    })?;
    let p = 1.0 - dist.cdf(t);
    Ok(TTest { t, p, mean_diff: mean, df, degenerate: false })
}

// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Closed-form Student's t CDF at 2 degrees of freedom.
    fn t_cdf_df2(t: f64) -> f64 {
        0.5 + t / (2.0 * std::f64::consts::SQRT_2 * (1.0 + t * t / 2.0).sqrt())
    }

    #[test]
    fn matches_reference_values() {
        let r = paired_one_tailed_t(&[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 3.464101615137754).abs() < 1e-12);
        assert!((r.p - 0.03708995011372429).abs() < 1e-12);
        assert_eq!(r.mean_diff, 2.0);
        assert_eq!(r.df, 2.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn agrees_with_closed_form_cdf_at_two_degrees() {
        for &(a, b, c) in &[(0.5, 1.0, 3.0), (-2.0, 0.5, 1.0), (10.0, 11.0, 15.0)] {
            let r = paired_one_tailed_t(&[a, b, c]).unwrap();
            assert!((r.p - (1.0 - t_cdf_df2(r.t))).abs() < 1e-12);
        }
    }

    #[test]
    fn negating_differences_mirrors_the_p_value() {
        let diffs = [0.4, -0.1, 0.9, 0.2, 0.05];
        let pos = paired_one_tailed_t(&diffs).unwrap();
        let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
        let mirrored = paired_one_tailed_t(&neg).unwrap();
        assert!((pos.p + mirrored.p - 1.0).abs() < 1e-12);
        assert!((pos.t + mirrored.t).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_degenerates_by_sign() {
        let up = paired_one_tailed_t(&[2.0, 2.0, 2.0]).unwrap();
        assert!(up.degenerate && up.p == 0.0 && up.t == f64::INFINITY);

        let down = paired_one_tailed_t(&[-1.0, -1.0]).unwrap();
        assert!(down.degenerate && down.p == 1.0);

        let flat = paired_one_tailed_t(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(flat.degenerate && flat.p == 0.5 && flat.t == 0.0);
    }

    #[test]
    fn rejects_tiny_or_broken_inputs() {
        assert!(paired_one_tailed_t(&[]).is_err());
        assert!(paired_one_tailed_t(&[1.0]).is_err());
        assert!(matches!(
            paired_one_tailed_t(&[1.0, f64::NAN]),
            Err(CoreError::Numeric { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn p_values_stay_in_the_unit_interval(
            diffs in proptest::collection::vec(-100.0f64..100.0, 2..30),
        ) {
            let r = paired_one_tailed_t(&diffs).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.p), "p = {}", r.p);
            prop_assert_eq!(r.df as usize, diffs.len() - 1);
        }

        #[test]
        fn shifting_differences_upward_never_raises_p(
            diffs in proptest::collection::vec(-10.0f64..10.0, 3..20),
            shift in 0.1f64..5.0,
        ) {
            let base = paired_one_tailed_t(&diffs).unwrap();
            let shifted: Vec<f64> = diffs.iter().map(|d| d + shift).collect();
            let moved = paired_one_tailed_t(&shifted).unwrap();
            if !base.degenerate && !moved.degenerate {
                prop_assert!(moved.p <= base.p + 1e-12);
            }
        }
    }
}
