//! Accuracy, domain-gap metrics, the bound surrogate and the view-strategy
//! ablation.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_prototypes, cost_matrix, reliability_raw, sinkhorn, uniform_marginal};
use crate::error::{shape_err, Error, Result};
use crate::model::{CloudForward, ModelState, Prepared};
use crate::numerics::matrix::{dot, norm, sq_dist};
use crate::numerics::ops::argmax;
use crate::rng::{derive_seed, SplitMix64};
use crate::training::{forward_clouds, Sample};

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Input("both sample sets must be nonempty".into()));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != d) {
        return Err(shape_err!("samples of mixed dimension"));
    }
    Ok(d)
}

/// Median pairwise Euclidean distance over the pooled sample; 1 when degenerate.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn kernel_mean(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|u| b.iter().map(|v| (-gamma * sq_dist(u, v)).exp()).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / (a.len() * b.len()) as f64
}

/// Biased Gaussian-kernel MMD, returned as `sqrt(max(0, MMD²))`.
pub fn mmd_rbf(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    check_sets(x, y)?;
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let m2 = kernel_mean(x, x, gamma) + kernel_mean(y, y, gamma) - 2.0 * kernel_mean(x, y, gamma);
    Ok(m2.max(0.0).sqrt())
}

fn mean_cov(x: &[Vec<f64>], d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len() as f64;
    let mut mu = vec![0.0; d];
    for v in x {
        mu.iter_mut().zip(v).for_each(|(m, a)| *m += a / n);
    }
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c: Vec<f64> = v.iter().zip(&mu).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::Numeric("covariance is not positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let d = check_sets(x, y)?;
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Input("Fréchet distance needs at least 2 samples per set".into()));
    }
    let (mx, cx) = mean_cov(x, d);
    let (my, cy) = mean_cov(y, d);
    let sx = sqrt_psd(&cx)?;
    let inner = &sx * &cy * &sx;
    let cross = sqrt_psd(&inner)?;
    let mean_term: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum();
    let fd = mean_term + cx.trace() + cy.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mmd: f64,
    pub frechet: f64,
    pub bandwidth: f64,
    pub bound_source_risk: f64,
    pub bound_ot_term: f64,
    pub bound_proto_term: f64,
    pub bound_total: f64,
    pub beta: f64,
    /// Number of classes with valid prototypes in both domains.
    pub shared_classes: usize,
}

/// Forward pass over every sample with the current parameters.
pub fn embed_samples(state: &ModelState, samples: &[Sample], rho: f64) -> Result<Vec<CloudForward>> {
    let prep = Prepared::new(state)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    forward_clouds(&state.params, &state.config, &prep, &refs, rho, None)
}

/// Domain-gap metrics and the three surrogate-bound terms. Target labels
/// are not needed: target prototypes use pseudo-labels.
pub fn bound_terms(
    state: &ModelState,
    source: &[Sample],
    labels: &[usize],
    target: &[Sample],
    beta: f64,
    epsilon: f64,
    rho: f64,
) -> Result<GapReport> {
    let src = embed_samples(state, source, rho)?;
    let tgt = embed_samples(state, target, rho)?;
    gap_from_forwards(&src, labels, &tgt, state.config.classes, beta, epsilon)
}

pub fn gap_from_forwards(
    src: &[CloudForward],
    labels: &[usize],
    tgt: &[CloudForward],
    classes: usize,
    beta: f64,
    epsilon: f64,
) -> Result<GapReport> {
    if !(beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be nonnegative, got {beta}")));
    }
    let es: Vec<Vec<f64>> = src.iter().map(|f| f.embedding.clone()).collect();
    let et: Vec<Vec<f64>> = tgt.iter().map(|f| f.embedding.clone()).collect();
    let bandwidth = median_bandwidth(&es, &et);
    let mmd = mmd_rbf(&es, &et, bandwidth)?;
    let frechet = frechet_distance(&es, &et)?;

    let preds: Vec<usize> = src.iter().map(|f| argmax(&f.probs)).collect();
    let risk = 1.0 - top1_accuracy(&preds, labels)?;

    let c = cost_matrix(&es, &et)?;
    let plan = sinkhorn(&c, epsilon, &uniform_marginal(c.rows()), &uniform_marginal(c.cols()), 1e-6, 5000)?;
    if !plan.converged {
        log::warn!("sinkhorn did not converge for the bound's transport term");
    }

    let ws: Vec<f64> = src.iter().map(|f| reliability_raw(&f.probs)).collect();
    let wt: Vec<f64> = tgt.iter().map(|f| reliability_raw(&f.probs)).collect();
    let pseudo: Vec<usize> = tgt.iter().map(|f| argmax(&f.probs)).collect();
    let us = build_prototypes(&es, labels, &ws, classes)?;
    let ut = build_prototypes(&et, &pseudo, &wt, classes)?;
    let shared: Vec<usize> = (0..classes).filter(|&k| us.is_valid(k) && ut.is_valid(k)).collect();
    if shared.is_empty() {
        log::warn!("no class has valid prototypes in both domains; prototype term set to 0");
    }
    let proto: f64 = shared.iter().map(|&k| sq_dist(us.vectors.row(k), ut.vectors.row(k))).sum();

    Ok(GapReport {
        mmd,
        frechet,
        bandwidth,
        bound_source_risk: risk,
        bound_ot_term: plan.cost,
        bound_proto_term: proto,
        bound_total: risk + 0.5 * plan.cost + beta * proto,
        beta,
        shared_classes: shared.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewStrategy {
    Average,
    WeightedAverage,
    Random,
    MaxSim,
    EntropyGuided,
}

impl ViewStrategy {
    pub const ALL: [ViewStrategy; 5] = [
        ViewStrategy::Average,
        ViewStrategy::WeightedAverage,
        ViewStrategy::Random,
        ViewStrategy::MaxSim,
        ViewStrategy::EntropyGuided,
    ];
}

impl fmt::Display for ViewStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViewStrategy::Average => "avg",
            ViewStrategy::WeightedAverage => "weighted_avg",
            ViewStrategy::Random => "random",
            ViewStrategy::MaxSim => "max_sim",
            ViewStrategy::EntropyGuided => "entropy_guided",
        };
        f.write_str(s)
    }
}

/// Class decided by one aggregation rule for one cloud.
pub fn strategy_prediction(f: &CloudForward, classes: &crate::numerics::Matrix, strategy: ViewStrategy, rng_seed: u64) -> usize {
    let m = f.view_probs.len();
    let k = f.view_probs[0].len();
    let mean_of = |weights: &[f64]| -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; k];
        for (q, w) in f.view_probs.iter().zip(weights) {
            out.iter_mut().zip(q).for_each(|(o, p)| *o += w / total * p);
        }
        out
    };
    match strategy {
        ViewStrategy::Average => argmax(&mean_of(&vec![1.0; m])),
        ViewStrategy::WeightedAverage => {
            let w: Vec<f64> = f.view_probs.iter().map(|q| reliability_raw(q)).collect();
            if w.iter().sum::<f64>() > 0.0 {
                argmax(&mean_of(&w))
            } else {
                argmax(&mean_of(&vec![1.0; m]))
            }
        }
        ViewStrategy::Random => argmax(&f.view_probs[SplitMix64::new(rng_seed).below(m)]),
        ViewStrategy::MaxSim => {
            let sim = |i: usize| {
                let c = argmax(&f.view_probs[i]);
                dot(&f.views[i], classes.row(c)) / (norm(&f.views[i]) * norm(classes.row(c))).max(1e-12)
            };
            let mut best = 0;
            for i in 1..m {
                if sim(i) > sim(best) {
                    best = i;
                }
            }
            argmax(&f.view_probs[best])
        }
        ViewStrategy::EntropyGuided => argmax(&f.probs),
    }
}

/// Accuracy of each aggregation rule on labelled samples.
pub fn ablation_view_strategies(
    state: &ModelState,
    samples: &[Sample],
    labels: &[usize],
    rho: f64,
    seed: u64,
) -> Result<Vec<(ViewStrategy, f64)>> {
    let fwd = embed_samples(state, samples, rho)?;
    let classes = Prepared::new(state)?.classes.hat;
    ViewStrategy::ALL
        .iter()
        .map(|&s| {
            let preds: Vec<usize> = fwd
                .iter()
                .enumerate()
                .map(|(i, f)| strategy_prediction(f, &classes, s, derive_seed(seed, i as u64)))
                .collect();
            top1_accuracy(&preds, labels).map(|a| (s, a))
        })
        .collect()
}

/// Blanks `floor(fraction · M)` seeded-random views of every sample.
pub fn corrupt_views(samples: &[Sample], fraction: f64, seed: u64) -> Vec<Sample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let m = s.sums.len();
            let n = ((fraction * m as f64).floor() as usize).min(m.saturating_sub(1));
            let mut idx: Vec<usize> = (0..m).collect();
            SplitMix64::new(derive_seed(seed, i as u64)).shuffle(&mut idx);
            let mut out = s.clone();
            for &v in &idx[..n] {
                out.sums[v].iter_mut().for_each(|x| *x = 0.0);
            }
            out
        })
        .collect()
}

/// First two principal components of the pooled rows.
pub fn pca_2d(x: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if x.len() < 2 {
        return Err(Error::Input("PCA needs at least 2 samples".into()));
    }
    let d = x[0].len();
    let (mu, cov) = mean_cov(x, d);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| eig.eigenvectors.column(order[k.min(d - 1)]).iter().copied().collect::<Vec<f64>>();
    let (a0, a1) = (axis(0), axis(1));
    Ok(x
        .iter()
        .map(|v| {
            let c: Vec<f64> = v.iter().zip(&mu).map(|(a, m)| a - m).collect();
            [dot(&c, &a0), if d > 1 { dot(&c, &a1) } else { 0.0 }]
        })
        .collect())
}

/// `domain,label,pc1,pc2` rows; `label` is empty for unlabeled samples.
pub fn write_pca_csv(path: &Path, rows: &[(&str, Option<usize>, [f64; 2])]) -> Result<()> {
    let mut out = String::from("domain,label,pc1,pc2\n");
    for (dom, label, p) in rows {
        let l = label.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{dom},{l},{},{}\n", p[0], p[1]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn mmd_examples() {
        let x = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        assert!(mmd_rbf(&x, &x, 0.7).unwrap() < 1e-9);
        assert_eq!(mmd_rbf(&[vec![1.0]], &[vec![1.0]], 1.0).unwrap(), 0.0);
        let (d, s) = (1.5f64, 0.8f64);
        let expect = (2.0 * (1.0 - (-d * d / (2.0 * s * s)).exp())).sqrt();
        let got = mmd_rbf(&[vec![0.0]], &[vec![d]], s).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(mmd_rbf(&x, &x, 0.0).is_err());
    }

    #[test]
    fn frechet_examples() {
        let mut rng = SplitMix64::new(3);
        let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.normal(), rng.normal()]).collect();
        assert!(frechet_distance(&x, &x).unwrap() < 1e-6);
        let m = [0.3, -1.2];
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0] + m[0], v[1] + m[1]]).collect();
        let fd = frechet_distance(&x, &y).unwrap();
        assert!((fd - (m[0] * m[0] + m[1] * m[1])).abs() < 1e-6, "{fd}");
        assert!(frechet_distance(&x[..1], &y).is_err());
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = SplitMix64::new(8);
        let x: Vec<Vec<f64>> = (0..200).map(|_| vec![5.0 * rng.normal(), 0.1 * rng.normal(), 0.0]).collect();
        let p = pca_2d(&x).unwrap();
        let var0: f64 = p.iter().map(|v| v[0] * v[0]).sum::<f64>() / 200.0;
        let var1: f64 = p.iter().map(|v| v[1] * v[1]).sum::<f64>() / 200.0;
        assert!(var0 > 100.0 * var1);
    }
}
