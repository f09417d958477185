//! Few-shot sampling, the momentum optimizer and the epoch loop with
//! one-epoch-lagged source prototypes.

mod objective;

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::alignment::{build_prototypes, reliability_raw};
use crate::error::{Error, Result};
use crate::eval::{bound_terms, GapReport};
use crate::model::{is_trainable, ModelConfig, ModelState, Params, Variant};
use crate::numerics::gradcheck::{finite_diff_check_at, GradCheck};
use crate::numerics::ops::argmax;
use crate::numerics::Matrix;
use crate::pointcloud::{PointSet, TargetDomain};
use crate::projection::{camera_rig, DEFAULT_DISTANCE};
use crate::rng::{derive_seed, SplitMix64};

pub use objective::{
    batch_objective, prepare_samples, BatchResult, LossTerms, LossWeights, ObjectiveConfig, Sample, StopGrad,
};
pub(crate) use objective::forward_clouds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub shots_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap, 0 disables clipping.
    pub clip_norm: f64,
    pub alpha: f64,
    pub rho: f64,
    pub epsilon_ot: f64,
    pub variant: Variant,
    pub seed: u64,
    pub m_views: usize,
    pub camera_distance: f64,
    pub rank: usize,
    pub tau: f64,
    pub loss_weights: LossWeights,
    /// Compute MMD, Fréchet distance and bound terms after every epoch.
    pub track_gap: bool,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shots_per_class: 16,
            epochs: 20,
            batch_size: 16,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-5,
            clip_norm: 0.0,
            alpha: 1.0,
            rho: 0.5,
            epsilon_ot: 0.05,
            variant: Variant::B,
            seed: 0,
            m_views: 10,
            camera_distance: DEFAULT_DISTANCE,
            rank: 4,
            tau: 0.07,
            loss_weights: LossWeights::FULL,
            track_gap: false,
            beta: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings for the standard synthetic benchmark: six views and a
    /// faster, lighter-weighted schedule than the defaults.
    pub fn standard() -> Self {
        Self {
            m_views: 6,
            lr: 0.005,
            alpha: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.shots_per_class == 0 {
            return bad("shots per class must be at least 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight decay, clip norm, alpha and beta must be nonnegative".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        if !(self.epsilon_ot >= crate::alignment::sinkhorn::MIN_EPSILON) {
            return bad(format!("epsilon {} too small", self.epsilon_ot));
        }
        if self.m_views == 0 {
            return bad("need at least one view".into());
        }
        Ok(())
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(classes);
        m.rank = self.rank;
        m.tau = self.tau;
        m
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            rho: self.rho,
            epsilon_ot: self.epsilon_ot,
            weights: self.loss_weights,
        }
    }
}

/// Up to `shots` samples per class by seeded shuffle, class-major order.
pub fn few_shot_sample(dataset: &[PointSet], classes: usize, shots: usize, seed: u64) -> Result<Vec<PointSet>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, ps) in dataset.iter().enumerate() {
        let y = ps
            .label
            .ok_or_else(|| Error::Dataset(format!("source sample {i} has no label")))?;
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Dataset(format!("label {y} outside {classes} classes")))?
            .push(i);
    }
    let mut out = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            return Err(Error::Dataset(format!("class {c} has no samples")));
        }
        SplitMix64::new(derive_seed(seed, c as u64)).shuffle(idx);
        out.extend(idx.iter().take(shots).map(|&i| dataset[i].clone()));
    }
    Ok(out)
}

/// Classical momentum SGD state.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub variant: Variant,
    /// Global gradient-norm cap over the trainable tensors; 0 disables it.
    pub clip_norm: f64,
    velocity: Params,
}

impl Sgd {
    pub fn new(params: &Params, lr: f64, momentum: f64, weight_decay: f64, variant: Variant) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            variant,
            clip_norm: 0.0,
            velocity: params.zeros_like(),
        }
    }

    /// `v = μ v + g + λ θ; θ -= lr v` on the variant's trainable tensors,
    /// with `g` rescaled first when its norm exceeds `clip_norm`;
    /// then class rows are renormalized. Non-finite gradients leave
    /// everything untouched and return a numeric error.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let (lr, mu, wd, variant) = (self.lr, self.momentum, self.weight_decay, self.variant);
        let scale = if self.clip_norm > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .filter(|(n, _)| is_trainable(n, variant))
                .map(|(_, g)| g.frobenius_sq())
                .sum::<f64>()
                .sqrt();
            if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 }
        } else {
            1.0
        };
        for (((name, p), (_, g)), (_, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.velocity.tensors_mut()) {
            if !is_trainable(name, variant) {
                continue;
            }
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + scale * gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        params.renormalize_class_rows();
        Ok(())
    }
}

/// Convenience single update with fresh velocity semantics.
pub fn sgd_step(state: &mut ModelState, sgd: &mut Sgd, grads: &Params) -> Result<()> {
    sgd.step(&mut state.params, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub ortho: f64,
    /// Absent while no prototypes exist yet.
    pub proto: Option<f64>,
    pub ot: f64,
    pub conf: f64,
    pub total: f64,
    pub source_accuracy: f64,
    /// Filled only by evaluation, which is allowed to read target labels.
    pub target_accuracy: Option<f64>,
    pub gap: Option<GapReport>,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub classes: Vec<String>,
    pub source_samples: usize,
    pub target_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
    /// Hidden target-label reads observed during training. Always 0.
    pub target_label_reads: usize,
}

impl TrainReport {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, jsonl: &Path, summary: &Path) -> Result<()> {
        std::fs::write(jsonl, self.to_jsonl()).map_err(|e| Error::io(jsonl, e))?;
        let s = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(summary, s).map_err(|e| Error::io(summary, e))
    }
}

/// Runs the full schedule. Only the target point clouds are consumed; their
/// hidden labels stay untouched.
pub fn train(
    source: &[PointSet],
    target: &TargetDomain,
    classes: &[String],
    knowledge: Matrix,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    cfg.validate()?;
    let reads_before = target.hidden.access_count();
    let k = classes.len();
    let model_cfg = cfg.model_config(k);
    let cams = camera_rig(cfg.m_views, cfg.camera_distance)?;
    let shots = few_shot_sample(source, k, cfg.shots_per_class, derive_seed(cfg.seed, 1))?;
    let labels: Vec<usize> = shots.iter().map(|p| p.label.expect("few-shot samples are labelled")).collect();
    let src = prepare_samples(&shots, &cams, &model_cfg)?;
    let tgt = prepare_samples(target.clouds(), &cams, &model_cfg)?;
    if tgt.is_empty() {
        return Err(Error::Dataset("target domain is empty".into()));
    }
    let mut state = ModelState::init(model_cfg, knowledge, cfg.seed)?;
    let (state_out, epochs) = train_prepared(&mut state, &src, &labels, &tgt, cfg)?;
    let reads = target.hidden.access_count() - reads_before;
    let report = TrainReport {
        config: cfg.clone(),
        classes: classes.to_vec(),
        source_samples: src.len(),
        target_samples: tgt.len(),
        epochs,
        checkpoint: None,
        target_label_reads: reads,
    };
    Ok((state_out, report))
}

/// Epoch loop over already-projected samples.
pub fn train_prepared(
    state: &mut ModelState,
    src: &[Sample],
    labels: &[usize],
    tgt: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    let obj = cfg.objective();
    let mut sgd = Sgd::new(&state.params, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.variant);
    sgd.clip_norm = cfg.clip_norm;
    let mut records = Vec::with_capacity(cfg.epochs);
    let k = state.config.classes;
    let d = state.config.d;

    for epoch in 1..=cfg.epochs {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, 1000 + epoch as u64));
        let mut s_order: Vec<usize> = (0..src.len()).collect();
        let mut t_order: Vec<usize> = (0..tgt.len()).collect();
        rng.shuffle(&mut s_order);
        rng.shuffle(&mut t_order);

        let mut sums = LossTerms::default();
        let mut proto_sum = 0.0;
        let mut proto_batches = 0usize;
        let mut batches = 0usize;
        let mut skipped = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut epoch_embs: Vec<Vec<f64>> = Vec::with_capacity(src.len());
        let mut epoch_labels: Vec<usize> = Vec::with_capacity(src.len());
        let mut epoch_weights: Vec<f64> = Vec::with_capacity(src.len());
        let prototypes = state.prototypes.clone();

        for (b, chunk) in s_order.chunks(cfg.batch_size).enumerate() {
            let s_batch: Vec<&Sample> = chunk.iter().map(|&i| &src[i]).collect();
            let y_batch: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let t_batch: Vec<&Sample> = (0..cfg.batch_size.min(tgt.len()))
                .map(|j| &tgt[t_order[(b * cfg.batch_size + j) % tgt.len()]])
                .collect();
            let res = batch_objective(
                &state.params,
                &state.config,
                &obj,
                &s_batch,
                &y_batch,
                &t_batch,
                prototypes.as_ref(),
                None,
                true,
            )?;
            for (f, &y) in res.source.iter().zip(&y_batch) {
                epoch_embs.push(f.embedding.clone());
                epoch_labels.push(y);
                epoch_weights.push(reliability_raw(&f.probs));
                correct += usize::from(argmax(&f.probs) == y);
                seen += 1;
            }
            let grads = res.grads.expect("gradients requested");
            if !res.terms.total.is_finite() {
                warn!("epoch {epoch} batch {b}: non-finite loss, skipping");
                skipped += 1;
                continue;
            }
            if let Err(e) = sgd.step(&mut state.params, &grads) {
                warn!("epoch {epoch} batch {b}: {e}, skipping");
                skipped += 1;
                continue;
            }
            if !res.sinkhorn_converged {
                debug!("epoch {epoch} batch {b}: sinkhorn hit its iteration cap");
            }
            let t = res.terms;
            sums.ce += t.ce;
            sums.ortho += t.ortho;
            sums.ot += t.ot;
            sums.conf += t.conf;
            sums.total += t.total;
            if res.proto_active {
                proto_sum += t.proto;
                proto_batches += 1;
            }
            batches += 1;
        }

        let n = batches.max(1) as f64;
        // Prototypes for the next epoch come from this epoch's source pass.
        if !epoch_embs.is_empty() {
            let protos = build_prototypes(&epoch_embs, &epoch_labels, &epoch_weights, k)?;
            debug_assert_eq!(protos.vectors.cols(), d);
            state.prototypes = Some(protos);
        }
        let gap = if cfg.track_gap {
            Some(bound_terms(state, src, labels, tgt, cfg.beta, cfg.epsilon_ot, cfg.rho)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            ce: sums.ce / n,
            ortho: sums.ortho / n,
            proto: (proto_batches > 0).then(|| proto_sum / proto_batches as f64),
            ot: sums.ot / n,
            conf: sums.conf / n,
            total: sums.total / n,
            source_accuracy: correct as f64 / seen.max(1) as f64,
            target_accuracy: None,
            gap,
            skipped_batches: skipped,
        };
        info!(
            "epoch {epoch}: total {:.4} ce {:.4} ot {:.4} conf {:.4} proto {} src_acc {:.3}",
            rec.total,
            rec.ce,
            rec.ot,
            rec.conf,
            rec.proto.map_or("-".to_string(), |p| format!("{p:.4}")),
            rec.source_accuracy
        );
        records.push(rec);
    }
    Ok((state.clone(), records))
}

/// Objective minus its value at the base point, summed term by term. The
/// constant offset leaves central differences unchanged but keeps large terms
/// that a parameter does not touch from swamping the float resolution.
fn offset_total(obj: &ObjectiveConfig, t: &LossTerms, base: &LossTerms) -> f64 {
    let w = obj.weights;
    (t.ce - base.ce)
        + obj.alpha
            * (w.ortho * (t.ortho - base.ortho)
                + w.proto * (t.proto - base.proto)
                + w.ot * (t.ot - base.ot)
                + w.conf * (t.conf - base.conf))
}

/// Central-difference check of the full objective, per trainable tensor.
/// Stop-gradient quantities are frozen at `state.params`. `max_probes`
/// limits the entries probed per tensor (seeded choice); `None` probes all.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    state: &ModelState,
    obj: &ObjectiveConfig,
    source: &[&Sample],
    labels: &[usize],
    target: &[&Sample],
    variant: Variant,
    step: f64,
    max_probes: Option<usize>,
) -> Result<BTreeMap<String, GradCheck>> {
    let protos = state.prototypes.as_ref();
    let base = batch_objective(&state.params, &state.config, obj, source, labels, target, protos, None, true)?;
    let grads = base.grads.expect("gradients requested");
    let stop = base.stop;
    let mut out = BTreeMap::new();
    for name in Params::trainable_names(variant) {
        let names = [name];
        let flat = state.params.flatten(&names);
        let analytic = grads.flatten(&names);
        let mut indices: Vec<usize> = (0..flat.len()).collect();
        if let Some(m) = max_probes {
            SplitMix64::new(crate::rng::fnv1a(name.as_bytes())).shuffle(&mut indices);
            indices.truncate(m);
        }
        let mut probe = state.params.clone();
        let loss = |x: &[f64]| -> Result<f64> {
            probe.assign(&names, x)?;
            let r = batch_objective(&probe, &state.config, obj, source, labels, target, protos, Some(&stop), false)?;
            Ok(offset_total(obj, &r.terms, &base.terms))
        };
        let check = finite_diff_check_at(loss, &analytic, &flat, &indices, step)?;
        out.insert(name.to_string(), check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::sample_primitive;

    fn labelled(class: usize, seed: u64) -> PointSet {
        let mut p = sample_primitive(class, 32, seed).unwrap();
        p.label = Some(class);
        p
    }

    #[test]
    fn few_shot_examples() {
        let data: Vec<PointSet> = (0..10).flat_map(|c| (0..3).map(move |s| labelled(c, s))).collect();
        let one = few_shot_sample(&data, 10, 1, 4).unwrap();
        assert_eq!(one.len(), 10);
        assert_eq!(one.iter().map(|p| p.label.unwrap()).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        assert_eq!(few_shot_sample(&data, 10, 50, 4).unwrap().len(), 30);
        assert_eq!(few_shot_sample(&data, 10, 2, 9).unwrap(), few_shot_sample(&data, 10, 2, 9).unwrap());
        assert!(matches!(few_shot_sample(&data, 11, 2, 9), Err(Error::Dataset(_))));
    }

    fn scalar_params() -> Params {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let s = ModelState::init(ModelConfig::new(2), crate::model::fallback_knowledge(&names, 64), 0).unwrap();
        s.params
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_params();
        let before = p.clone();
        let zero = p.zeros_like();
        let mut sgd = Sgd::new(&p, 0.1, 0.9, 0.0, Variant::B);
        sgd.step(&mut p, &zero).unwrap();
        let (x, y) = (p.flatten(Params::NAMES), before.flatten(Params::NAMES));
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-14));

        let mut g = p.zeros_like();
        g.query.fill(1.0);
        let mut sgd = Sgd::new(&p, 0.1, 0.0, 0.0, Variant::B);
        sgd.step(&mut p, &g).unwrap();
        assert!((before.query.data()[0] - p.query.data()[0] - 0.1).abs() < 1e-12);

        let mut p = before.clone();
        let mut sgd = Sgd::new(&p, 0.1, 0.9, 0.0, Variant::B);
        sgd.step(&mut p, &g).unwrap();
        sgd.step(&mut p, &g).unwrap();
        assert!((before.query.data()[3] - p.query.data()[3] - 0.29).abs() < 1e-12);

        let mut bad = g.clone();
        bad.query.data_mut()[0] = f64::NAN;
        let snapshot = p.clone();
        assert!(matches!(sgd.step(&mut p, &bad), Err(Error::Numeric(_))));
        assert_eq!(p, snapshot);
    }

    #[test]
    fn sgd_respects_variant_and_renormalizes() {
        let mut p = scalar_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.patch_lora_b.fill(1.0);
        g.text_lora_b.fill(1.0);
        g.patch_w.fill(1.0);
        g.class_emb.fill(0.3);
        let mut sgd = Sgd::new(&p, 0.5, 0.0, 0.0, Variant::T);
        sgd.step(&mut p, &g).unwrap();
        assert_eq!(p.patch_lora_b, before.patch_lora_b);
        assert_eq!(p.patch_w, before.patch_w);
        assert_ne!(p.text_lora_b, before.text_lora_b);
        for r in 0..2 {
            let n = crate::numerics::matrix::norm(p.class_emb.row(r));
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
