//! Paired t-test and summary statistics.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub mean_diff: f64,
    pub t_statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
    /// Differences had zero variance; `t` is reported as 0 and `p` as 1.
    #[serde(default)]
    pub degenerate: bool,
}

/// Mean and sample standard deviation (n − 1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided Student-t tail probability `P(|T| ≥ |t|)` with `df` degrees of
/// freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Paired two-sided t-test on `treatment − baseline`.
pub fn paired_t_test(baseline: &[f64], treatment: &[f64]) -> Result<PairedTestResult> {
    if baseline.len() != treatment.len() {
        return Err(PipelineError::invalid(format!(
            "paired samples differ in length: {} vs {}",
            baseline.len(),
            treatment.len()
        )));
    }
    let n = baseline.len();
    if n < 2 {
        return Err(PipelineError::invalid("paired t-test needs at least two pairs"));
    }
    if baseline.iter().chain(treatment).any(|v| !v.is_finite()) {
        return Err(PipelineError::invalid("paired samples must be finite"));
    }
    let diffs: Vec<f64> = treatment.iter().zip(baseline).map(|(t, b)| t - b).collect();
    let (mean, sd) = mean_std(&diffs);
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Ok(PairedTestResult {
            mean_diff: mean,
            t_statistic: 0.0,
            p_value: 1.0,
            n,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(PairedTestResult {
        mean_diff: mean,
        t_statistic: t,
        p_value: student_t_two_sided(t, (n - 1) as f64),
        n,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_are_degenerate() {
        let x = [0.1, 0.5, 0.3];
        let r = paired_t_test(&x, &x).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn constant_shift_is_degenerate() {
        let b = [0.1, 0.5, 0.3, 0.9];
        let t: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        let r = paired_t_test(&b, &t).unwrap();
        assert!(r.degenerate);
        assert!((r.mean_diff - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antisymmetric() {
        let b = [0.1, 0.5, 0.3, 0.9, 0.2];
        let t = [0.2, 0.4, 0.6, 1.0, 0.25];
        let x = paired_t_test(&b, &t).unwrap();
        let y = paired_t_test(&t, &b).unwrap();
        assert_eq!(x.t_statistic, -y.t_statistic);
        assert_eq!(x.p_value, y.p_value);
    }

    #[test]
    fn known_critical_values() {
        // t_{0.975, 9} = 2.262157; t_{0.975, 1} = 12.7062.
        assert!((student_t_two_sided(2.262157, 9.0) - 0.05).abs() < 1e-5);
        assert!((student_t_two_sided(12.7062, 1.0) - 0.05).abs() < 1e-5);
        assert_eq!(student_t_two_sided(0.0, 5.0), 1.0);
    }

    #[test]
    fn input_errors() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, f64::NAN], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-12);
    }
}
