//! Forward passes with caches and the matching hand-derived backward passes.

use crate::error::{shape_err, Error, Result};
use crate::numerics::attention::{mhca_backward, mhca_forward, MhcaCache};
use crate::numerics::matrix::{axpy, dot};
use crate::numerics::ops::{entropy, gelu, gelu_grad, l2_normalize, l2_normalize_backward, softmax_backward, softmax_raw};
use crate::numerics::{softmax, Matrix, ProbVector};
use crate::pointcloud::PointSet;
use crate::projection::DepthMap;
use crate::selection::{aggregate_raw, select_views};

use super::{ModelConfig, ModelState, Params};

/// `base + scale · B · A`; `base` is left untouched.
pub fn apply_lora(base: &Matrix, a: &Matrix, b: &Matrix, scale: f64) -> Result<Matrix> {
    if b.cols() != a.rows() {
        return Err(shape_err!("adapter ranks differ: B has {} columns, A has {} rows", b.cols(), a.rows()));
    }
    if (b.rows(), a.cols()) != base.shape() {
        return Err(shape_err!(
            "adapter product is {}x{}, base is {}x{}",
            b.rows(),
            a.cols(),
            base.rows(),
            base.cols()
        ));
    }
    let mut eff = base.clone();
    if scale != 0.0 {
        eff.add_scaled(scale, &b.matmul(a)?);
    }
    Ok(eff)
}

/// Gradients of the adapter pair given the gradient of the effective weight.
pub fn lora_backward(d_eff: &Matrix, a: &Matrix, b: &Matrix, scale: f64) -> Result<(Matrix, Matrix)> {
    let da = b.t_matmul(d_eff)?.scaled(scale);
    let db = d_eff.matmul_t(a)?.scaled(scale);
    Ok((da, db))
}

/// Pixel-wise sum of all non-overlapping `patch x patch` tiles. Because the
/// patch projection is linear and tokens are mean-pooled, this is all the
/// view encoder needs from a depth map.
pub fn patch_sums(dm: &DepthMap, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if dm.height != cfg.image || dm.width != cfg.image {
        return Err(shape_err!(
            "depth map is {}x{}, encoder expects {}x{}",
            dm.height,
            dm.width,
            cfg.image,
            cfg.image
        ));
    }
    let p = cfg.patch;
    let mut sums = vec![0.0; p * p];
    for r in 0..dm.height {
        for c in 0..dm.width {
            sums[(r % p) * p + c % p] += dm.get(r, c);
        }
    }
    Ok(sums)
}

// ---------------------------------------------------------------- points

#[derive(Debug, Clone)]
pub struct PointCache {
    points: Vec<[f64; 3]>,
    pre: Matrix,
    hidden: Matrix,
    /// Winning point per (group, channel); `usize::MAX` for empty groups.
    argmax: Vec<usize>,
}

pub const POINT_GROUPS: usize = 4;

fn point_group(p: &[f64; 3]) -> usize {
    2 * usize::from(p[0] >= 0.0) + usize::from(p[1] >= 0.0)
}

pub(crate) fn point_forward(ps: &PointSet, params: &Params) -> Result<(Matrix, PointCache)> {
    if ps.len() < 8 {
        return Err(Error::Degenerate(format!("point encoder needs at least 8 points, got {}", ps.len())));
    }
    let flat: Vec<f64> = ps.points.iter().flatten().copied().collect();
    let x = Matrix::from_vec(ps.len(), 3, flat).map_err(|_| Error::Input("non-finite point coordinate".into()))?;
    let pre = x.linear(&params.pt_w1, Some(&params.pt_b1))?;
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = hidden.linear(&params.pt_w2, Some(&params.pt_b2))?;
    let t = out.cols();
    let mut tokens = Matrix::zeros(POINT_GROUPS, t);
    let mut argmax = vec![usize::MAX; POINT_GROUPS * t];
    for (i, p) in ps.points.iter().enumerate() {
        let g = point_group(p);
        let row = out.row(i);
        for c in 0..t {
            let slot = g * t + c;
            if argmax[slot] == usize::MAX || row[c] > tokens[(g, c)] {
                tokens[(g, c)] = row[c];
                argmax[slot] = i;
            }
        }
    }
    Ok((
        tokens,
        PointCache {
            points: ps.points.clone(),
            pre,
            hidden,
            argmax,
        },
    ))
}

/// Per-point MLP followed by channel-wise max-pooling into 4 tokens, one per
/// sign pattern of (x, y). Empty groups give zero tokens.
pub fn encode_point_set(ps: &PointSet, state: &ModelState) -> Result<Matrix> {
    point_forward(ps, &state.params).map(|(t, _)| t)
}

/// Routes token gradients back to the winning points only.
pub(crate) fn point_backward(cache: &PointCache, params: &Params, d_tokens: &Matrix, grads: &mut Params) -> Result<()> {
    let t = d_tokens.cols();
    let h = cache.hidden.cols();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut slot_of = std::collections::HashMap::new();
    for g in 0..POINT_GROUPS {
        for c in 0..t {
            let i = cache.argmax[g * t + c];
            let gval = d_tokens[(g, c)];
            if i == usize::MAX || gval == 0.0 {
                continue;
            }
            let k = *slot_of.entry(i).or_insert_with(|| {
                rows.push((i, vec![0.0; t]));
                rows.len() - 1
            });
            rows[k].1[c] += gval;
        }
    }
    for (i, dout) in &rows {
        let hid = cache.hidden.row(*i);
        grads.pt_w2.add_outer(1.0, dout, hid);
        axpy(1.0, dout, grads.pt_b2.data_mut());
        let dh = params.pt_w2.t_mul_vec(dout);
        let pre = cache.pre.row(*i);
        let da: Vec<f64> = (0..h).map(|k| dh[k] * gelu_grad(pre[k])).collect();
        grads.pt_w1.add_outer(1.0, &da, &cache.points[*i]);
        axpy(1.0, &da, grads.pt_b1.data_mut());
    }
    Ok(())
}

// ---------------------------------------------------------------- prompts

#[derive(Debug, Clone)]
pub struct TextSide {
    pub prompt: Matrix,
    cache: MhcaCache,
}

pub(crate) fn text_forward(params: &Params, cfg: &ModelConfig) -> Result<TextSide> {
    let (prompt, cache) = mhca_forward(&params.query, &params.knowledge, &params.knowledge, cfg.heads, &params.text_mhca())?;
    Ok(TextSide { prompt, cache })
}

/// `P_t = FFN(MHCA(q W_Q, T_llm W_Kt, T_llm W_Vt))`, shape `prompt_len x d`.
pub fn gen_text_prompt(state: &ModelState) -> Result<Matrix> {
    text_forward(&state.params, &state.config).map(|t| t.prompt)
}

#[derive(Debug, Clone)]
pub(crate) struct VisualCache {
    hidden: Matrix,
    mhca: MhcaCache,
}

pub(crate) fn visual_forward(params: &Params, cfg: &ModelConfig, i3d: &Matrix) -> Result<(Matrix, VisualCache)> {
    if i3d.rows() == 0 {
        return Err(Error::Input("empty point-token matrix".into()));
    }
    let (hidden, mhca) = mhca_forward(&params.query, i3d, i3d, cfg.heads, &params.vis_mhca())?;
    let prompt = hidden.linear(&params.proj_w, Some(&params.proj_b))?;
    Ok((prompt, VisualCache { hidden, mhca }))
}

/// `P_v = T_proj(FFN(MHCA(q W_Q, I3D W_Kv, I3D W_Vv)))` with the same query as the text side.
pub fn gen_visual_prompt(state: &ModelState, i3d: &Matrix) -> Result<Matrix> {
    visual_forward(&state.params, &state.config, i3d).map(|(p, _)| p)
}

/// Returns `dL/dI3D` from the prompt path and accumulates weight gradients.
fn visual_backward(params: &Params, cache: &VisualCache, d_prompt: &Matrix, grads: &mut Params) -> Result<Matrix> {
    grads.proj_w.add_assign(&d_prompt.t_matmul(&cache.hidden)?);
    axpy(1.0, &d_prompt.column_sums(), grads.proj_b.data_mut());
    let d_hidden = d_prompt.matmul(&params.proj_w)?;
    let back = mhca_backward(&cache.mhca, &params.vis_mhca(), &d_hidden)?;
    grads.w_q.add_assign(&back.grads.w_q);
    grads.vis_wk.add_assign(&back.grads.w_k);
    grads.vis_wv.add_assign(&back.grads.w_v);
    grads.vis_ffn_w1.add_assign(&back.grads.ffn.w1);
    grads.vis_ffn_b1.add_assign(&back.grads.ffn.b1);
    grads.vis_ffn_w2.add_assign(&back.grads.ffn.w2);
    grads.vis_ffn_b2.add_assign(&back.grads.ffn.b2);
    grads.query.add_assign(&back.d_query);
    let mut d_i3d = back.d_keys;
    d_i3d.add_assign(&back.d_values);
    Ok(d_i3d)
}

// ---------------------------------------------------------------- classes

/// Normalized class vectors `ĉ_k = normalize(W_txt (T_k + mean P_t))`.
#[derive(Debug, Clone)]
pub struct ClassVectors {
    pub hat: Matrix,
    divisors: Vec<f64>,
    pooled: Matrix,
    text_eff: Matrix,
    text: TextSide,
}

pub fn class_vectors(state: &ModelState) -> Result<ClassVectors> {
    class_forward(&state.params, &state.config)
}

pub(crate) fn class_forward(params: &Params, cfg: &ModelConfig) -> Result<ClassVectors> {
    let text = text_forward(params, cfg)?;
    let mean_prompt = text.prompt.row_mean();
    let mut pooled = params.class_emb.clone();
    for r in 0..pooled.rows() {
        axpy(1.0, &mean_prompt, pooled.row_mut(r));
    }
    let text_eff = apply_lora(&params.text_w, &params.text_lora_a, &params.text_lora_b, cfg.lora_scale)?;
    let raw = pooled.matmul_t(&text_eff)?;
    let mut hat = Matrix::zeros(raw.rows(), raw.cols());
    let mut divisors = Vec::with_capacity(raw.rows());
    for r in 0..raw.rows() {
        let (u, div) = l2_normalize(raw.row(r));
        hat.row_mut(r).copy_from_slice(&u);
        divisors.push(div);
    }
    Ok(ClassVectors {
        hat,
        divisors,
        pooled,
        text_eff,
        text,
    })
}

pub(crate) fn text_backward(params: &Params, cfg: &ModelConfig, cv: &ClassVectors, d_hat: &Matrix, grads: &mut Params) -> Result<()> {
    let mut d_raw = Matrix::zeros(d_hat.rows(), d_hat.cols());
    for r in 0..d_hat.rows() {
        let g = l2_normalize_backward(cv.hat.row(r), cv.divisors[r], d_hat.row(r));
        d_raw.row_mut(r).copy_from_slice(&g);
    }
    let d_eff = d_raw.t_matmul(&cv.pooled)?;
    let (da, db) = lora_backward(&d_eff, &params.text_lora_a, &params.text_lora_b, cfg.lora_scale)?;
    grads.text_lora_a.add_assign(&da);
    grads.text_lora_b.add_assign(&db);
    let d_pooled = d_raw.matmul(&cv.text_eff)?;
    grads.class_emb.add_assign(&d_pooled);
    let lq = cv.text.prompt.rows();
    let per_row: Vec<f64> = d_pooled.column_sums().iter().map(|v| v / lq as f64).collect();
    let mut d_prompt = Matrix::zeros(lq, per_row.len());
    for r in 0..lq {
        d_prompt.row_mut(r).copy_from_slice(&per_row);
    }
    let back = mhca_backward(&cv.text.cache, &params.text_mhca(), &d_prompt)?;
    grads.w_q.add_assign(&back.grads.w_q);
    grads.text_wk.add_assign(&back.grads.w_k);
    grads.text_wv.add_assign(&back.grads.w_v);
    grads.text_ffn_w1.add_assign(&back.grads.ffn.w1);
    grads.text_ffn_b1.add_assign(&back.grads.ffn.b1);
    grads.text_ffn_w2.add_assign(&back.grads.ffn.w2);
    grads.text_ffn_b2.add_assign(&back.grads.ffn.b2);
    grads.query.add_assign(&back.d_query);
    Ok(())
}

/// Softmax over cosine similarities to the class vectors divided by `tau`.
pub fn class_probs(v: &[f64], classes: &Matrix, tau: f64) -> Result<ProbVector> {
    if v.len() != classes.cols() {
        return Err(shape_err!("{}-d embedding vs {}-d class vectors", v.len(), classes.cols()));
    }
    let logits = (0..classes.rows())
        .map(|k| crate::numerics::cosine_sim(v, classes.row(k)))
        .collect::<Result<Vec<_>>>()?;
    softmax(&logits, tau)
}

// ---------------------------------------------------------------- views

/// Shared per-step quantities: class vectors, adapted weights, temperature.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub classes: ClassVectors,
    patch_eff: Matrix,
    out_eff: Matrix,
    pub tau: f64,
}

impl Prepared {
    pub fn new(state: &ModelState) -> Result<Self> {
        Self::from_params(&state.params, &state.config)
    }

    pub(crate) fn from_params(params: &Params, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            classes: class_forward(params, cfg)?,
            patch_eff: apply_lora(&params.patch_w, &params.patch_lora_a, &params.patch_lora_b, cfg.lora_scale)?,
            out_eff: apply_lora(&params.out_w, &params.out_lora_a, &params.out_lora_b, cfg.lora_scale)?,
            tau: params.log_tau.data()[0].exp(),
        })
    }
}

struct ViewOut {
    mean: Vec<f64>,
    unit: Vec<f64>,
    divisor: f64,
}

fn view_forward(params: &Params, cfg: &ModelConfig, prep: &Prepared, sums: &[f64], prompt_sum: &[f64]) -> Result<ViewOut> {
    if sums.len() != cfg.patch_len() {
        return Err(shape_err!("{} patch values, encoder expects {}", sums.len(), cfg.patch_len()));
    }
    let n_patch = cfg.patches_per_view() as f64;
    let n_tok = n_patch + cfg.prompt_len as f64;
    let mut pooled = prep.patch_eff.mul_vec(sums);
    axpy(n_patch, params.patch_b.data(), &mut pooled);
    axpy(1.0, prompt_sum, &mut pooled);
    pooled.iter_mut().for_each(|v| *v /= n_tok);
    let mut h = prep.out_eff.mul_vec(&pooled);
    axpy(1.0, params.out_b.data(), &mut h);
    let (unit, divisor) = l2_normalize(&h);
    Ok(ViewOut {
        mean: pooled,
        unit,
        divisor,
    })
}

/// Encodes one depth map. A missing prompt counts as `prompt_len` zero tokens.
pub fn encode_view(dm: &DepthMap, prompt: Option<&Matrix>, state: &ModelState) -> Result<Vec<f64>> {
    let cfg = &state.config;
    let prep = Prepared::new(state)?;
    let sums = patch_sums(dm, cfg)?;
    let prompt_sum = match prompt {
        Some(p) => {
            if p.cols() != cfg.d_patch {
                return Err(shape_err!("prompt tokens are {}-d, encoder tokens {}-d", p.cols(), cfg.d_patch));
            }
            p.column_sums()
        }
        None => vec![0.0; cfg.d_patch],
    };
    view_forward(&state.params, cfg, &prep, &sums, &prompt_sum).map(|v| v.unit)
}

// ---------------------------------------------------------------- clouds

/// Everything the loss needs from one cloud, plus the caches for its backward pass.
#[derive(Debug, Clone)]
pub struct CloudForward {
    pub view_probs: Vec<Vec<f64>>,
    pub entropies: Vec<f64>,
    pub selected: Vec<usize>,
    pub probs: Vec<f64>,
    /// Normalized mean of the selected view embeddings.
    pub embedding: Vec<f64>,
    pub views: Vec<Vec<f64>>,
    pub i3d: Matrix,
    pub prompt: Matrix,
    view_means: Vec<Vec<f64>>,
    view_divs: Vec<f64>,
    emb_div: f64,
    logits: Vec<Vec<f64>>,
    point: PointCache,
    visual: VisualCache,
}

/// Full per-cloud forward. `selected` overrides entropy-guided selection.
pub(crate) fn cloud_forward(
    params: &Params,
    cfg: &ModelConfig,
    prep: &Prepared,
    sums: &[Vec<f64>],
    points: &PointSet,
    rho: f64,
    selected: Option<&[usize]>,
) -> Result<CloudForward> {
    if sums.is_empty() {
        return Err(Error::Input("cloud has no views".into()));
    }
    let (i3d, point) = point_forward(points, params)?;
    let (prompt, visual) = visual_forward(params, cfg, &i3d)?;
    let prompt_sum = prompt.column_sums();
    let m = sums.len();
    let mut views = Vec::with_capacity(m);
    let mut view_means = Vec::with_capacity(m);
    let mut view_divs = Vec::with_capacity(m);
    let mut logits = Vec::with_capacity(m);
    let mut view_probs = Vec::with_capacity(m);
    let mut entropies = Vec::with_capacity(m);
    let hat = &prep.classes.hat;
    for s in sums {
        let out = view_forward(params, cfg, prep, s, &prompt_sum)?;
        let z: Vec<f64> = (0..hat.rows()).map(|k| dot(&out.unit, hat.row(k)) / prep.tau).collect();
        let q = softmax_raw(&z, 1.0);
        entropies.push(entropy(&q));
        view_probs.push(q);
        logits.push(z);
        views.push(out.unit);
        view_means.push(out.mean);
        view_divs.push(out.divisor);
    }
    let selected = match selected {
        Some(s) => {
            if s.is_empty() || s.iter().any(|&i| i >= m) {
                return Err(Error::Input(format!("invalid view selection {s:?} for {m} views")));
            }
            s.to_vec()
        }
        None => select_views(&entropies, rho)?,
    };
    let probs = aggregate_raw(&view_probs, &selected)?;
    let mut mean_v = vec![0.0; views[0].len()];
    for &i in &selected {
        axpy(1.0 / selected.len() as f64, &views[i], &mut mean_v);
    }
    let (embedding, emb_div) = l2_normalize(&mean_v);
    Ok(CloudForward {
        view_probs,
        entropies,
        selected,
        probs,
        embedding,
        views,
        i3d,
        prompt,
        view_means,
        view_divs,
        emb_div,
        logits,
        point,
        visual,
    })
}

/// Per-cloud gradient contribution. Adapter and text-side gradients are
/// deferred to the batch level through `d_patch_eff`, `d_out_eff`, `d_hat`.
#[derive(Debug, Clone)]
pub(crate) struct CloudGrad {
    pub params: Params,
    pub d_patch_eff: Matrix,
    pub d_out_eff: Matrix,
    pub d_hat: Matrix,
    pub d_log_tau: f64,
}

impl CloudGrad {
    pub fn zeros(params: &Params, prep: &Prepared) -> Self {
        Self {
            params: params.zeros_like(),
            d_patch_eff: Matrix::zeros(prep.patch_eff.rows(), prep.patch_eff.cols()),
            d_out_eff: Matrix::zeros(prep.out_eff.rows(), prep.out_eff.cols()),
            d_hat: Matrix::zeros(prep.classes.hat.rows(), prep.classes.hat.cols()),
            d_log_tau: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &CloudGrad) {
        self.params.add_assign(&other.params);
        self.d_patch_eff.add_assign(&other.d_patch_eff);
        self.d_out_eff.add_assign(&other.d_out_eff);
        self.d_hat.add_assign(&other.d_hat);
        self.d_log_tau += other.d_log_tau;
    }

    /// Resolves the deferred terms into `self.params`.
    pub fn finish(mut self, params: &Params, cfg: &ModelConfig, prep: &Prepared) -> Result<Params> {
        let (da, db) = lora_backward(&self.d_patch_eff, &params.patch_lora_a, &params.patch_lora_b, cfg.lora_scale)?;
        self.params.patch_lora_a.add_assign(&da);
        self.params.patch_lora_b.add_assign(&db);
        let (da, db) = lora_backward(&self.d_out_eff, &params.out_lora_a, &params.out_lora_b, cfg.lora_scale)?;
        self.params.out_lora_a.add_assign(&da);
        self.params.out_lora_b.add_assign(&db);
        text_backward(params, cfg, &prep.classes, &self.d_hat, &mut self.params)?;
        self.params.log_tau.data_mut()[0] += self.d_log_tau;
        Ok(self.params)
    }
}

/// Backward of one cloud given `dL/dprobs`, `dL/dembedding` and an extra
/// `dL/dI3D` term.
pub(crate) fn cloud_backward(
    params: &Params,
    cfg: &ModelConfig,
    prep: &Prepared,
    sums: &[Vec<f64>],
    fwd: &CloudForward,
    d_probs: &[f64],
    d_emb: &[f64],
    d_i3d_extra: Option<&Matrix>,
) -> Result<CloudGrad> {
    let mut g = CloudGrad::zeros(params, prep);
    let sel = fwd.selected.len() as f64;
    let d_mean_v: Vec<f64> = l2_normalize_backward(&fwd.embedding, fwd.emb_div, d_emb)
        .into_iter()
        .map(|x| x / sel)
        .collect();
    let dq: Vec<f64> = d_probs.iter().map(|x| x / sel).collect();
    let n_tok = (cfg.patches_per_view() + cfg.prompt_len) as f64;
    let mut d_prompt_row = vec![0.0; cfg.d_patch];
    let hat = &prep.classes.hat;
    let inv_tau = 1.0 / prep.tau;

    for &m in &fwd.selected {
        let dz = softmax_backward(&fwd.view_probs[m], &dq);
        let mut dv = d_mean_v.clone();
        for (k, &dzk) in dz.iter().enumerate() {
            axpy(dzk * inv_tau, hat.row(k), &mut dv);
            axpy(dzk * inv_tau, &fwd.views[m], g.d_hat.row_mut(k));
            g.d_log_tau -= dzk * fwd.logits[m][k];
        }
        let dh = l2_normalize_backward(&fwd.views[m], fwd.view_divs[m], &dv);
        g.d_out_eff.add_outer(1.0, &dh, &fwd.view_means[m]);
        let mut d_pooled = prep.out_eff.t_mul_vec(&dh);
        d_pooled.iter_mut().for_each(|x| *x /= n_tok);
        g.d_patch_eff.add_outer(1.0, &d_pooled, &sums[m]);
        axpy(1.0, &d_pooled, &mut d_prompt_row);
    }

    let lq = fwd.prompt.rows();
    let mut d_prompt = Matrix::zeros(lq, cfg.d_patch);
    for r in 0..lq {
        d_prompt.row_mut(r).copy_from_slice(&d_prompt_row);
    }
    let mut d_i3d = visual_backward(params, &fwd.visual, &d_prompt, &mut g.params)?;
    if let Some(extra) = d_i3d_extra {
        d_i3d.add_assign(extra);
    }
    point_backward(&fwd.point, params, &d_i3d, &mut g.params)?;
    Ok(g)
}
