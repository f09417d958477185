//! Uncertainty-weighted prototype alignment, entropic optimal transport and
//! the confidence and orthogonality regularizers.

pub mod sinkhorn;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::matrix::{axpy, dot, norm, sq_dist};
use crate::numerics::ops::log_sum_exp;
use crate::numerics::{entropy, Matrix, ProbVector};

pub use sinkhorn::{sinkhorn, sinkhorn_traced, sinkhorn_uniform, uniform_marginal, SweepStats, TransportPlan};

/// `1 - H(p) / ln K`, clamped to `[0, 1]`.
pub fn reliability_weight(p: &ProbVector) -> f64 {
    reliability_raw(p.as_slice())
}

pub(crate) fn reliability_raw(p: &[f64]) -> f64 {
    let k = p.len().max(2) as f64;
    (1.0 - entropy(p) / k.ln()).clamp(0.0, 1.0)
}

/// Arg-max class; ties go to the lowest index.
pub fn pseudo_label(p: &ProbVector) -> usize {
    p.argmax()
}

/// Weighted class means. Classes with zero total weight are invalid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub vectors: Matrix,
    pub weights: Vec<f64>,
}

impl Prototypes {
    pub fn from_parts(vectors: Matrix, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != vectors.rows() {
            return Err(shape_err!("{} weights for {} prototypes", weights.len(), vectors.rows()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Input("prototype weights must be finite and nonnegative".into()));
        }
        Ok(Self { vectors, weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn is_valid(&self, class: usize) -> bool {
        self.weights.get(class).is_some_and(|&w| w > 0.0) && norm(self.vectors.row(class)) > 1e-12
    }

    pub fn valid_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.is_valid(c)).collect()
    }
}

/// `U_c = Σ w_i v_i / Σ w_i` over samples labelled `c`.
pub fn build_prototypes(embs: &[Vec<f64>], labels: &[usize], weights: &[f64], classes: usize) -> Result<Prototypes> {
    if embs.is_empty() {
        return Err(Error::Input("no embeddings for prototypes".into()));
    }
    if embs.len() != labels.len() || embs.len() != weights.len() {
        return Err(shape_err!(
            "{} embeddings, {} labels, {} weights",
            embs.len(),
            labels.len(),
            weights.len()
        ));
    }
    let d = embs[0].len();
    let mut vectors = Matrix::zeros(classes, d);
    let mut totals = vec![0.0; classes];
    for ((v, &y), &w) in embs.iter().zip(labels).zip(weights) {
        if y >= classes {
            return Err(Error::Input(format!("label {y} outside {classes} classes")));
        }
        if v.len() != d {
            return Err(shape_err!("embedding of dim {} among dim {d}", v.len()));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Input(format!("invalid prototype weight {w}")));
        }
        if w > 0.0 {
            axpy(w, v, vectors.row_mut(y));
            totals[y] += w;
        }
    }
    for (c, &t) in totals.iter().enumerate() {
        if t > 0.0 {
            vectors.row_mut(c).iter_mut().for_each(|x| *x /= t);
        }
    }
    Prototypes::from_parts(vectors, totals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoLoss {
    pub value: f64,
    /// Targets dropped because their pseudo-label has no valid prototype.
    pub skipped: usize,
    /// Set when the included weights sum to zero; the value is then 0.
    pub zero_weight: bool,
    /// `dL/d target embedding`, one row per target.
    pub d_embs: Vec<Vec<f64>>,
    /// `dL/d log τ`.
    pub d_log_tau: f64,
}

/// `-Σ w_j log softmax_c(cos(v_j, U_c)/τ)[ŷ_j] / Σ w_j` over valid classes,
/// with gradients for the target embeddings and `log τ`.
pub fn proto_loss_grad(
    target_embs: &[Vec<f64>],
    target_weights: &[f64],
    pseudo_labels: &[usize],
    protos: &Prototypes,
    temperature: f64,
) -> Result<ProtoLoss> {
    let n = target_embs.len();
    if target_weights.len() != n || pseudo_labels.len() != n {
        return Err(shape_err!(
            "{n} targets, {} weights, {} pseudo-labels",
            target_weights.len(),
            pseudo_labels.len()
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let valid = protos.valid_classes();
    let units: Vec<Vec<f64>> = valid
        .iter()
        .map(|&c| {
            let u = protos.vectors.row(c);
            let nu = norm(u);
            u.iter().map(|x| x / nu).collect()
        })
        .collect();
    let mut out = ProtoLoss {
        value: 0.0,
        skipped: 0,
        zero_weight: false,
        d_embs: target_embs.iter().map(|e| vec![0.0; e.len()]).collect(),
        d_log_tau: 0.0,
    };
    let included: Vec<(usize, usize)> = (0..n)
        .filter_map(|j| match valid.iter().position(|&c| c == pseudo_labels[j]) {
            Some(pos) => Some((j, pos)),
            None => {
                out.skipped += 1;
                None
            }
        })
        .collect();
    let total: f64 = included.iter().map(|&(j, _)| target_weights[j]).sum();
    if !(total > 0.0) {
        out.zero_weight = true;
        return Ok(out);
    }
    for &(j, pos) in &included {
        let w = target_weights[j];
        if w == 0.0 {
            continue;
        }
        let e = &target_embs[j];
        let ne = norm(e);
        if ne == 0.0 {
            return Err(Error::Degenerate(format!("target embedding {j} is zero")));
        }
        if units[0].len() != e.len() {
            return Err(shape_err!("{}-d embedding vs {}-d prototypes", e.len(), units[0].len()));
        }
        let cos: Vec<f64> = units.iter().map(|u| dot(e, u) / ne).collect();
        let logits: Vec<f64> = cos.iter().map(|c| c / temperature).collect();
        let lse = log_sum_exp(&logits);
        out.value += w * (lse - logits[pos]) / total;
        // dL/dlogit_c = (w/W)(softmax_c - [c = ŷ]).
        for (c, u) in units.iter().enumerate() {
            let mut dl = (logits[c] - lse).exp();
            if c == pos {
                dl -= 1.0;
            }
            dl *= w / total;
            out.d_log_tau -= dl * logits[c];
            let coef = dl / (temperature * ne);
            axpy(coef, u, &mut out.d_embs[j]);
            axpy(-coef * cos[c] / ne, e, &mut out.d_embs[j]);
        }
    }
    Ok(out)
}

pub fn proto_loss(
    target_embs: &[Vec<f64>],
    target_weights: &[f64],
    pseudo_labels: &[usize],
    protos: &Prototypes,
    temperature: f64,
) -> Result<f64> {
    proto_loss_grad(target_embs, target_weights, pseudo_labels, protos, temperature).map(|l| l.value)
}

/// Squared Euclidean distances between source rows and target rows.
pub fn cost_matrix(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Matrix> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Input("cost matrix needs nonempty sets".into()));
    }
    let d = source[0].len();
    if source.iter().chain(target).any(|v| v.len() != d) {
        return Err(shape_err!("embeddings of mixed dimension"));
    }
    let mut c = Matrix::zeros(source.len(), target.len());
    for (i, s) in source.iter().enumerate() {
        for (j, t) in target.iter().enumerate() {
            c[(i, j)] = sq_dist(s, t);
        }
    }
    Ok(c)
}

/// `<C, π>` with `π` held fixed: gradients for both embedding sets.
pub fn ot_loss_grad(source: &[Vec<f64>], target: &[Vec<f64>], plan: &Matrix) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = cost_matrix(source, target)?;
    if plan.shape() != c.shape() {
        return Err(shape_err!("plan is {:?}, cost is {:?}", plan.shape(), c.shape()));
    }
    let value = c.data().iter().zip(plan.data()).map(|(x, y)| x * y).sum();
    let mut ds: Vec<Vec<f64>> = source.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut dt: Vec<Vec<f64>> = target.iter().map(|v| vec![0.0; v.len()]).collect();
    for (i, s) in source.iter().enumerate() {
        for (j, t) in target.iter().enumerate() {
            let p = plan[(i, j)];
            for k in 0..s.len() {
                let g = 2.0 * p * (s[k] - t[k]);
                ds[i][k] += g;
                dt[j][k] -= g;
            }
        }
    }
    Ok((value, ds, dt))
}

/// Mean entropy over source plus mean entropy over target.
pub fn conf_loss(source_probs: &[ProbVector], target_probs: &[ProbVector]) -> Result<f64> {
    if source_probs.is_empty() || target_probs.is_empty() {
        return Err(Error::Input("confidence loss needs both domains".into()));
    }
    let mean = |ps: &[ProbVector]| ps.iter().map(|p| entropy(p.as_slice())).sum::<f64>() / ps.len() as f64;
    Ok(mean(source_probs) + mean(target_probs))
}

/// `‖I Iᵀ - 𝕀‖²_F` over the token Gram matrix.
pub fn ortho_loss(i3d: &Matrix) -> f64 {
    ortho_gap(i3d).frobenius_sq()
}

fn ortho_gap(i3d: &Matrix) -> Matrix {
    let mut g = i3d.matmul_t(i3d).expect("gram of a matrix with itself");
    for t in 0..g.rows() {
        g[(t, t)] -= 1.0;
    }
    g
}

/// Gradient of [`ortho_loss`]: `4 (I Iᵀ - 𝕀) I`.
pub fn ortho_grad(i3d: &Matrix) -> Matrix {
    ortho_gap(i3d).matmul(i3d).expect("shapes agree").scaled(4.0)
}

/// `ce + α (ortho + proto + ot + conf)`.
pub fn total_loss(ce: f64, ortho: f64, proto: f64, ot: f64, conf: f64, alpha: f64) -> f64 {
    ce + alpha * (ortho + proto + ot + conf)
}
