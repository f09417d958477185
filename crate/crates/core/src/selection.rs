//! Entropy-guided view selection and aggregation of per-view predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{class_probs, encode_view, ModelState, Prepared};
use crate::numerics::{entropy, Matrix, ProbVector};
use crate::projection::ViewSet;

pub const DEFAULT_RHO: f64 = 0.5;

/// Natural-log entropy of a class distribution, in `[0, ln K]`.
pub fn predictive_entropy(p: &ProbVector) -> f64 {
    entropy(p.as_slice())
}

/// Nearest-rank threshold: entry `ceil(rho * M)` (1-based) of the sorted entropies.
pub fn entropy_threshold(entropies: &[f64], rho: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::Input("no views to select from".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Parameter(format!("percentile {rho} outside (0, 1]")));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::Numeric("non-finite view entropy".into()));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    // The small offset keeps e.g. 0.3 * 10 from rounding up to rank 4.
    let rank = ((rho * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    Ok(sorted[rank - 1])
}

/// Indices of all views at or below the threshold, ascending. Never empty.
pub fn select_views(entropies: &[f64], rho: f64) -> Result<Vec<usize>> {
    let tau = entropy_threshold(entropies, rho)?;
    Ok((0..entropies.len()).filter(|&i| entropies[i] <= tau).collect())
}

pub(crate) fn aggregate_raw(probs: &[Vec<f64>], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Input("empty view selection".into()));
    }
    let k = probs.first().map(Vec::len).unwrap_or(0);
    let mut out = vec![0.0; k];
    for &i in selected {
        let p = probs
            .get(i)
            .ok_or_else(|| Error::Input(format!("selected view {i} of {}", probs.len())))?;
        if p.len() != k {
            return Err(Error::Shape(format!("view {i} has {} classes, expected {k}", p.len())));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let n = selected.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Uniform mean of the selected distributions.
pub fn aggregate(probs: &[ProbVector], selected: &[usize]) -> Result<ProbVector> {
    let raw: Vec<Vec<f64>> = probs.iter().map(|p| p.as_slice().to_vec()).collect();
    ProbVector::new(aggregate_raw(&raw, selected)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub per_view_probs: Vec<ProbVector>,
    pub per_view_entropy: Vec<f64>,
    pub selected: Vec<usize>,
    pub aggregated: ProbVector,
}

impl ViewPrediction {
    pub fn from_probs(per_view_probs: Vec<ProbVector>, rho: f64) -> Result<Self> {
        let per_view_entropy: Vec<f64> = per_view_probs.iter().map(predictive_entropy).collect();
        let selected = select_views(&per_view_entropy, rho)?;
        let aggregated = aggregate(&per_view_probs, &selected)?;
        Ok(Self {
            per_view_probs,
            per_view_entropy,
            selected,
            aggregated,
        })
    }
}

/// Encodes every view with the given visual prompt, classifies it, and
/// aggregates the confident subset.
pub fn predict_cloud(vs: &ViewSet, state: &ModelState, prompt: Option<&Matrix>, rho: f64) -> Result<ViewPrediction> {
    if vs.is_empty() {
        return Err(Error::Input("empty view set".into()));
    }
    let prep = Prepared::new(state)?;
    let probs = vs
        .views
        .iter()
        .map(|dm| {
            let v = encode_view(dm, prompt, state)?;
            class_probs(&v, &prep.classes.hat, prep.tau)
        })
        .collect::<Result<Vec<_>>>()?;
    ViewPrediction::from_probs(probs, rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let u = ProbVector::uniform(10);
        assert!((predictive_entropy(&u) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(predictive_entropy(&ProbVector::one_hot(4, 2)), 0.0);
        let half = ProbVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((predictive_entropy(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_selection() {
        assert_eq!(select_views(&[0.1, 0.9, 0.5, 0.2], 0.5).unwrap(), vec![0, 3]);
        assert_eq!(entropy_threshold(&[0.1, 0.9, 0.5, 0.2], 0.5).unwrap(), 0.2);
        assert_eq!(select_views(&[0.3; 5], 0.5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_views(&[0.7], 0.5).unwrap(), vec![0]);
        assert_eq!(select_views(&[0.4, 0.1, 0.9], 1.0).unwrap(), vec![0, 1, 2]);
        let ten: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(select_views(&ten, 0.3).unwrap(), vec![0, 1, 2]);
        assert!(select_views(&[0.1], 0.0).is_err());
        assert!(select_views(&[], 0.5).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let b = ProbVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(aggregate(&[a.clone(), b.clone()], &[0, 1]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(aggregate(&[a.clone(), b.clone()], &[0]).unwrap(), a);
        assert_eq!(aggregate(&[b.clone(), b.clone(), b.clone()], &[0, 1, 2]).unwrap(), b);
        assert!(aggregate(&[a], &[]).is_err());
    }
}
