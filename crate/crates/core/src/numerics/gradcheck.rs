//! Central-difference gradient checking.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Relative error as `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grad(params)` against central differences of `loss` on every
/// parameter.
pub fn finite_diff_check<F, G>(loss: F, grad: G, params: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let analytic = grad(params)?;
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(loss, &analytic, params, &all, step)
}

/// Same as [`finite_diff_check`] with a precomputed analytic gradient and an
/// explicit list of parameter indices to probe.
pub fn finite_diff_check_at<F>(mut loss: F, analytic: &[f64], params: &[f64], indices: &[usize], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Parameter(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = GradCheck {
        max_rel_error: -1.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: indices.len(),
    };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss(&probe)?;
        probe[i] = orig - step;
        let minus = loss(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss probing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_rel_error {
            worst.max_rel_error = err;
            worst.worst_index = i;
            worst.analytic = analytic[i];
            worst.numeric = numeric;
        }
    }
    worst.max_rel_error = worst.max_rel_error.max(0.0);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![0.3, -1.2, 2.5, 0.01];
        let r = finite_diff_check(
            |x| Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>()),
            |x| Ok(x.to_vec()),
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_direction_has_zero_gradient() {
        let p = vec![1.0, 2.0];
        let r = finite_diff_check_at(|x| Ok(x[0] * x[0]), &[2.0, 0.0], &p, &[1], 1e-5).unwrap();
        assert_eq!(r.numeric, 0.0);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = finite_diff_check(|x| Ok(x[0].sin()), |_| Ok(vec![0.0]), &[1.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.9);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(finite_diff_check(|x| Ok(x[0]), |_| Ok(vec![1.0]), &[1.0], 1e-2).is_err());
        let r = finite_diff_check(|_| Ok(f64::NAN), |_| Ok(vec![1.0]), &[1.0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
