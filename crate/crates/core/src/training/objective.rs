//! The composite minibatch objective and its gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    cost_matrix, ortho_grad, ortho_loss, ot_loss_grad, proto_loss_grad, reliability_raw, sinkhorn, uniform_marginal,
    Prototypes,
};
use crate::error::{Error, Result};
use crate::model::{cloud_backward, cloud_forward, patch_sums, CloudForward, CloudGrad, ModelConfig, Params, Prepared};
use crate::numerics::ops::{argmax, entropy, entropy_grad};
use crate::numerics::Matrix;
use crate::pointcloud::PointSet;
use crate::projection::{project_all, Camera};

/// A cloud with its depth views reduced to per-view patch sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sums: Vec<Vec<f64>>,
    pub points: PointSet,
}

impl Sample {
    pub fn new(points: &PointSet, cams: &[Camera], cfg: &ModelConfig) -> Result<Self> {
        let views = project_all(points, cams)?;
        let sums = views.views.iter().map(|v| patch_sums(v, cfg)).collect::<Result<_>>()?;
        Ok(Self {
            sums,
            points: points.clone(),
        })
    }
}

pub fn prepare_samples(clouds: &[PointSet], cams: &[Camera], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    clouds.par_iter().map(|c| Sample::new(c, cams, cfg)).collect()
}

/// Multipliers on the auxiliary terms, on top of the global `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ortho: f64,
    pub proto: f64,
    pub ot: f64,
    pub conf: f64,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights {
        ortho: 1.0,
        proto: 1.0,
        ot: 1.0,
        conf: 1.0,
    };
    /// Cross-entropy plus the orthogonality regularizer only.
    pub const CE_ORTHO: LossWeights = LossWeights {
        ortho: 1.0,
        proto: 0.0,
        ot: 0.0,
        conf: 0.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub rho: f64,
    pub epsilon_ot: f64,
    pub weights: LossWeights,
}

/// Quantities treated as constants by the gradient: view selections, the
/// transport plan, pseudo-labels and target reliability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGrad {
    pub source_selected: Vec<Vec<usize>>,
    pub target_selected: Vec<Vec<usize>>,
    pub plan: Option<Matrix>,
    pub pseudo_labels: Vec<usize>,
    pub target_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub ortho: f64,
    pub proto: f64,
    pub ot: f64,
    pub conf: f64,
    pub total: f64,
}

pub struct BatchResult {
    pub terms: LossTerms,
    pub grads: Option<Params>,
    pub stop: StopGrad,
    pub source: Vec<CloudForward>,
    pub target: Vec<CloudForward>,
    pub proto_active: bool,
    pub sinkhorn_converged: bool,
}

pub(crate) fn forward_clouds(
    params: &Params,
    cfg: &ModelConfig,
    prep: &Prepared,
    samples: &[&Sample],
    rho: f64,
    selections: Option<&[Vec<usize>]>,
) -> Result<Vec<CloudForward>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sel = selections.map(|v| v[i].as_slice());
            cloud_forward(params, cfg, prep, &s.sums, &s.points, rho, sel)
        })
        .collect()
}

/// Evaluates the objective on one source/target minibatch. Target samples
/// carry no labels. When `frozen` is given, its stop-gradient quantities are
/// reused instead of recomputed.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    params: &Params,
    cfg: &ModelConfig,
    obj: &ObjectiveConfig,
    source: &[&Sample],
    labels: &[usize],
    target: &[&Sample],
    prototypes: Option<&Prototypes>,
    frozen: Option<&StopGrad>,
    want_grads: bool,
) -> Result<BatchResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Input("minibatch needs source and target samples".into()));
    }
    if labels.len() != source.len() {
        return Err(Error::Input(format!("{} labels for {} source samples", labels.len(), source.len())));
    }
    let prep = Prepared::from_params(params, cfg)?;
    let src = forward_clouds(params, cfg, &prep, source, obj.rho, frozen.map(|f| f.source_selected.as_slice()))?;
    let tgt = forward_clouds(params, cfg, &prep, target, obj.rho, frozen.map(|f| f.target_selected.as_slice()))?;
    let (ns, nt) = (src.len() as f64, tgt.len() as f64);
    let k = cfg.classes;
    let w = obj.weights;
    let a = obj.alpha;

    let mut dp_s: Vec<Vec<f64>> = vec![vec![0.0; k]; src.len()];
    let mut dp_t: Vec<Vec<f64>> = vec![vec![0.0; k]; tgt.len()];
    let mut de_s: Vec<Vec<f64>> = src.iter().map(|f| vec![0.0; f.embedding.len()]).collect();
    let mut de_t: Vec<Vec<f64>> = tgt.iter().map(|f| vec![0.0; f.embedding.len()]).collect();
    let mut terms = LossTerms::default();

    for (i, (f, &y)) in src.iter().zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} outside {k} classes")));
        }
        terms.ce -= f.probs[y].ln() / ns;
        dp_s[i][y] -= 1.0 / (f.probs[y] * ns);
    }

    let conf_s: f64 = src.iter().map(|f| entropy(&f.probs)).sum::<f64>() / ns;
    let conf_t: f64 = tgt.iter().map(|f| entropy(&f.probs)).sum::<f64>() / nt;
    terms.conf = conf_s + conf_t;
    let c_conf = a * w.conf;
    if c_conf != 0.0 {
        for (dp, f) in dp_s.iter_mut().zip(&src) {
            entropy_grad(&f.probs).iter().zip(dp.iter_mut()).for_each(|(g, d)| *d += c_conf * g / ns);
        }
        for (dp, f) in dp_t.iter_mut().zip(&tgt) {
            entropy_grad(&f.probs).iter().zip(dp.iter_mut()).for_each(|(g, d)| *d += c_conf * g / nt);
        }
    }

    terms.ortho = src.iter().map(|f| ortho_loss(&f.i3d)).sum::<f64>() / ns + tgt.iter().map(|f| ortho_loss(&f.i3d)).sum::<f64>() / nt;
    let c_ortho = a * w.ortho;

    let e_s: Vec<Vec<f64>> = src.iter().map(|f| f.embedding.clone()).collect();
    let e_t: Vec<Vec<f64>> = tgt.iter().map(|f| f.embedding.clone()).collect();
    let mut plan = frozen.and_then(|f| f.plan.clone());
    let mut sinkhorn_converged = true;
    if plan.is_none() && w.ot != 0.0 {
        let c = cost_matrix(&e_s, &e_t)?;
        let t = sinkhorn(&c, obj.epsilon_ot, &uniform_marginal(c.rows()), &uniform_marginal(c.cols()), 1e-6, 1000)?;
        sinkhorn_converged = t.converged;
        plan = Some(t.plan);
    }
    if let Some(p) = &plan {
        let (v, gs, gt) = ot_loss_grad(&e_s, &e_t, p)?;
        terms.ot = v;
        let c_ot = a * w.ot;
        for (d, g) in de_s.iter_mut().zip(&gs) {
            d.iter_mut().zip(g).for_each(|(x, y)| *x += c_ot * y);
        }
        for (d, g) in de_t.iter_mut().zip(&gt) {
            d.iter_mut().zip(g).for_each(|(x, y)| *x += c_ot * y);
        }
    }

    let (pseudo_labels, target_weights) = match frozen {
        Some(f) => (f.pseudo_labels.clone(), f.target_weights.clone()),
        None => (
            tgt.iter().map(|f| argmax(&f.probs)).collect(),
            tgt.iter().map(|f| reliability_raw(&f.probs)).collect(),
        ),
    };
    let mut d_log_tau = 0.0;
    let proto_active = prototypes.is_some() && w.proto != 0.0;
    if let (Some(protos), true) = (prototypes, proto_active) {
        let tau = prep.tau;
        let r = proto_loss_grad(&e_t, &target_weights, &pseudo_labels, protos, tau)?;
        terms.proto = r.value;
        let c_proto = a * w.proto;
        for (d, g) in de_t.iter_mut().zip(&r.d_embs) {
            d.iter_mut().zip(g).for_each(|(x, y)| *x += c_proto * y);
        }
        d_log_tau += c_proto * r.d_log_tau;
    }

    terms.total = terms.ce + a * (w.ortho * terms.ortho + w.proto * terms.proto + w.ot * terms.ot + w.conf * terms.conf);

    let stop = StopGrad {
        source_selected: src.iter().map(|f| f.selected.clone()).collect(),
        target_selected: tgt.iter().map(|f| f.selected.clone()).collect(),
        plan,
        pseudo_labels,
        target_weights,
    };

    let grads = if want_grads {
        let jobs: Vec<(&Sample, &CloudForward, &Vec<f64>, &Vec<f64>, f64)> = source
            .iter()
            .zip(&src)
            .zip(dp_s.iter().zip(&de_s))
            .map(|((s, f), (dp, de))| (*s, f, dp, de, ns))
            .chain(
                target
                    .iter()
                    .zip(&tgt)
                    .zip(dp_t.iter().zip(&de_t))
                    .map(|((s, f), (dp, de))| (*s, f, dp, de, nt)),
            )
            .collect();
        let parts: Vec<CloudGrad> = jobs
            .par_iter()
            .map(|(s, f, dp, de, n)| {
                let extra = if c_ortho != 0.0 {
                    Some(ortho_grad(&f.i3d).scaled(c_ortho / n))
                } else {
                    None
                };
                cloud_backward(params, cfg, &prep, &s.sums, f, dp, de, extra.as_ref())
            })
            .collect::<Result<_>>()?;
        let mut acc = CloudGrad::zeros(params, &prep);
        for p in &parts {
            acc.add_assign(p);
        }
        acc.d_log_tau += d_log_tau;
        Some(acc.finish(params, cfg, &prep)?)
    } else {
        None
    };

    Ok(BatchResult {
        terms,
        grads,
        stop,
        source: src,
        target: tgt,
        proto_active,
        sinkhorn_converged,
    })
}
