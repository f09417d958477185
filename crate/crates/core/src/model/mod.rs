//! The trainable encoder stack: a patch-based depth-view encoder with
//! low-rank adapters and visual prompts, a max-pooled point encoder, the
//! knowledge-driven prompt generators and the cosine classifier head.

mod encode;
pub mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{FfnWeights, Matrix, MhcaWeights};
use crate::rng::{fnv1a, SplitMix64};

pub use encode::{
    apply_lora, class_probs, class_vectors, encode_point_set, encode_view, gen_text_prompt, gen_visual_prompt,
    lora_backward, patch_sums, ClassVectors, CloudForward, PointCache, Prepared, TextSide,
};
pub(crate) use encode::{cloud_backward, cloud_forward, CloudGrad};

/// Which adapter sets train alongside prompts, class embeddings and the point encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Class-embedding (text) side adapter only.
    T,
    /// View-encoder adapters only.
    V,
    /// Both.
    #[default]
    B,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" => Ok(Variant::T),
            "V" => Ok(Variant::V),
            "B" => Ok(Variant::B),
            _ => Err(Error::Parameter(format!("unknown variant {s:?} (expected T, V or B)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::T => "T",
            Variant::V => "V",
            Variant::B => "B",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    /// Embedding and prompt dimension.
    pub d: usize,
    /// Point-token dimension.
    pub d_tok: usize,
    /// View-encoder token dimension.
    pub d_patch: usize,
    pub patch: usize,
    pub image: usize,
    pub prompt_len: usize,
    pub heads: usize,
    pub rank: usize,
    pub lora_scale: f64,
    pub point_hidden: usize,
    pub tau: f64,
}

impl ModelConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            d: 64,
            d_tok: 64,
            d_patch: 64,
            patch: 8,
            image: 32,
            prompt_len: 4,
            heads: 4,
            rank: 4,
            lora_scale: 1.0,
            point_hidden: 64,
            tau: 0.07,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    pub fn patches_per_view(&self) -> usize {
        (self.image / self.patch).pow(2)
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.d / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.rank == 0 {
            return Err(Error::Parameter("adapter rank must be at least 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Parameter(format!("d={} not divisible by {} heads", self.d, self.heads)));
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::Parameter(format!("image {} not divisible into {}-pixel patches", self.image, self.patch)));
        }
        if self.prompt_len == 0 || self.d_tok == 0 || self.d_patch == 0 || self.point_hidden == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

macro_rules! define_params {
    ($($name:ident),* $(,)?) => {
        /// Every tensor of the model, frozen ones included. Biases are `1 x n`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Params {
            $(pub $name: Matrix,)*
        }

        impl Params {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
                vec![$((stringify!($name), &self.$name)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
                vec![$((stringify!($name), &mut self.$name)),*]
            }

            /// Same shapes, all zeros.
            pub fn zeros_like(&self) -> Params {
                Params { $($name: Matrix::zeros(self.$name.rows(), self.$name.cols()),)* }
            }
        }
    };
}

define_params!(
    patch_w,
    patch_b,
    patch_lora_a,
    patch_lora_b,
    out_w,
    out_b,
    out_lora_a,
    out_lora_b,
    text_w,
    text_lora_a,
    text_lora_b,
    knowledge,
    class_emb,
    query,
    w_q,
    text_wk,
    text_wv,
    text_ffn_w1,
    text_ffn_b1,
    text_ffn_w2,
    text_ffn_b2,
    vis_wk,
    vis_wv,
    vis_ffn_w1,
    vis_ffn_b1,
    vis_ffn_w2,
    vis_ffn_b2,
    proj_w,
    proj_b,
    pt_w1,
    pt_b1,
    pt_w2,
    pt_b2,
    log_tau,
);

/// Tensors that never receive updates.
pub const FROZEN: &[&str] = &["patch_w", "patch_b", "out_w", "out_b", "text_w", "knowledge"];
const VIEW_ADAPTERS: &[&str] = &["patch_lora_a", "patch_lora_b", "out_lora_a", "out_lora_b"];
const TEXT_ADAPTERS: &[&str] = &["text_lora_a", "text_lora_b"];

pub fn is_trainable(name: &str, variant: Variant) -> bool {
    if FROZEN.contains(&name) {
        return false;
    }
    if VIEW_ADAPTERS.contains(&name) {
        return variant != Variant::T;
    }
    if TEXT_ADAPTERS.contains(&name) {
        return variant != Variant::V;
    }
    true
}

impl Params {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn trainable_names(variant: Variant) -> Vec<&'static str> {
        Self::NAMES.iter().copied().filter(|n| is_trainable(n, variant)).collect()
    }

    /// Concatenates the named tensors in the given order.
    pub fn flatten(&self, names: &[&str]) -> Vec<f64> {
        let mut out = Vec::new();
        for (n, m) in self.tensors() {
            if names.contains(&n) {
                out.extend_from_slice(m.data());
            }
        }
        out
    }

    /// Inverse of [`Params::flatten`].
    pub fn assign(&mut self, names: &[&str], values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for (n, m) in self.tensors_mut() {
            if names.contains(&n) {
                let len = m.data().len();
                let src = values
                    .get(offset..offset + len)
                    .ok_or_else(|| shape_err!("flat parameter vector too short at {n}"))?;
                m.data_mut().copy_from_slice(src);
                offset += len;
            }
        }
        if offset != values.len() {
            return Err(shape_err!("{} values for {offset} parameters", values.len()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn renormalize_class_rows(&mut self) {
        for r in 0..self.class_emb.rows() {
            let row = self.class_emb.row_mut(r);
            let n = crate::numerics::matrix::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub(crate) fn text_mhca(&self) -> MhcaWeights<'_> {
        MhcaWeights {
            w_q: &self.w_q,
            w_k: &self.text_wk,
            w_v: &self.text_wv,
            ffn: FfnWeights {
                w1: &self.text_ffn_w1,
                b1: &self.text_ffn_b1,
                w2: &self.text_ffn_w2,
                b2: &self.text_ffn_b2,
            },
        }
    }

    pub(crate) fn vis_mhca(&self) -> MhcaWeights<'_> {
        MhcaWeights {
            w_q: &self.w_q,
            w_k: &self.vis_wk,
            w_v: &self.vis_wv,
            ffn: FfnWeights {
                w1: &self.vis_ffn_w1,
                b1: &self.vis_ffn_b1,
                w2: &self.vis_ffn_w2,
                b2: &self.vis_ffn_b2,
            },
        }
    }
}

/// Parameters plus the configuration that fixes their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    /// Source prototypes cached at the end of the previous epoch.
    pub prototypes: Option<crate::alignment::Prototypes>,
}

fn uniform(rng: &mut SplitMix64, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let s = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-s, s)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite uniform draws")
}

impl ModelState {
    /// Seeded initialization. `knowledge` must be `classes x d`.
    pub fn init(config: ModelConfig, knowledge: Matrix, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        if knowledge.shape() != (c.classes, c.d) {
            return Err(Error::Config(format!(
                "knowledge embeddings are {}x{}, model expects {}x{}",
                knowledge.rows(),
                knowledge.cols(),
                c.classes,
                c.d
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let (p, e, d, t, h, r, f) = (c.patch_len(), c.d_patch, c.d, c.d_tok, c.point_hidden, c.rank, c.ffn_hidden());
        let rng = &mut rng;
        let mut params = Params {
            patch_w: uniform(rng, e, p, p),
            patch_b: Matrix::zeros(1, e),
            patch_lora_a: uniform(rng, r, p, p),
            patch_lora_b: Matrix::zeros(e, r),
            out_w: uniform(rng, d, e, e),
            out_b: Matrix::zeros(1, d),
            out_lora_a: uniform(rng, r, e, e),
            out_lora_b: Matrix::zeros(d, r),
            text_w: Matrix::identity(d),
            text_lora_a: uniform(rng, r, d, d),
            text_lora_b: Matrix::zeros(d, r),
            knowledge,
            class_emb: uniform(rng, c.classes, d, d),
            query: uniform(rng, c.prompt_len, d, d),
            w_q: uniform(rng, d, d, d),
            text_wk: uniform(rng, d, d, d),
            text_wv: uniform(rng, d, d, d),
            text_ffn_w1: uniform(rng, f, d, d),
            text_ffn_b1: uniform(rng, 1, f, d),
            text_ffn_w2: uniform(rng, d, f, f),
            text_ffn_b2: uniform(rng, 1, d, f),
            vis_wk: uniform(rng, d, t, t),
            vis_wv: uniform(rng, d, t, t),
            vis_ffn_w1: uniform(rng, f, d, d),
            vis_ffn_b1: uniform(rng, 1, f, d),
            vis_ffn_w2: uniform(rng, d, f, f),
            vis_ffn_b2: uniform(rng, 1, d, f),
            proj_w: uniform(rng, e, d, d),
            proj_b: uniform(rng, 1, e, d),
            pt_w1: uniform(rng, h, 3, 3),
            pt_b1: uniform(rng, 1, h, 3),
            pt_w2: uniform(rng, t, h, h),
            pt_b2: uniform(rng, 1, t, h),
            log_tau: Matrix::filled(1, 1, c.tau.ln()),
        };
        params.renormalize_class_rows();
        Ok(Self {
            config,
            params,
            prototypes: None,
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        let fresh = Self::init(self.config.clone(), self.params.knowledge.clone(), 0)?;
        for ((n, a), (_, b)) in self.params.tensors().into_iter().zip(fresh.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(shape_err!("tensor {n} is {:?}, expected {:?}", a.shape(), b.shape()));
            }
        }
        Ok(())
    }
}

/// One fixed pseudo-random unit vector per class name, for runs without a
/// knowledge-embedding file.
pub fn fallback_knowledge(class_names: &[String], d: usize) -> Matrix {
    let mut m = Matrix::zeros(class_names.len(), d);
    for (i, name) in class_names.iter().enumerate() {
        let mut rng = SplitMix64::new(fnv1a(name.as_bytes()));
        let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = crate::numerics::matrix::norm(&row).max(f64::MIN_POSITIVE);
        m.row_mut(i).iter_mut().zip(&row).for_each(|(dst, v)| *dst = v / n);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn init_is_seeded_and_unit_rows() {
        let cfg = ModelConfig::new(3);
        let a = ModelState::init(cfg.clone(), fallback_knowledge(&names(3), 64), 5).unwrap();
        let b = ModelState::init(cfg.clone(), fallback_knowledge(&names(3), 64), 5).unwrap();
        let c = ModelState::init(cfg, fallback_knowledge(&names(3), 64), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.query, c.params.query);
        for r in 0..3 {
            let n = crate::numerics::matrix::norm(a.params.class_emb.row(r));
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!((a.params.tau() - 0.07).abs() < 1e-12);
        assert_eq!(a.params.patch_lora_b.frobenius_sq(), 0.0);
        a.check_shapes().unwrap();
    }

    #[test]
    fn knowledge_shape_checked() {
        let r = ModelState::init(ModelConfig::new(3), fallback_knowledge(&names(2), 64), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn fallback_is_per_name_and_unit() {
        let a = fallback_knowledge(&["cube".into(), "cone".into()], 16);
        let b = fallback_knowledge(&["cone".into()], 16);
        assert_eq!(a.row(1), b.row(0));
        assert_ne!(a.row(0), a.row(1));
        assert!((crate::numerics::matrix::norm(a.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variant_masks() {
        assert!(is_trainable("patch_lora_a", Variant::V));
        assert!(!is_trainable("patch_lora_a", Variant::T));
        assert!(is_trainable("text_lora_b", Variant::T));
        assert!(!is_trainable("text_lora_b", Variant::V));
        assert!(is_trainable("class_emb", Variant::T));
        for v in [Variant::T, Variant::V, Variant::B] {
            for f in FROZEN {
                assert!(!is_trainable(f, v));
            }
        }
        assert_eq!("b".parse::<Variant>().unwrap(), Variant::B);
        assert!("x".parse::<Variant>().is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let s = ModelState::init(ModelConfig::new(2), fallback_knowledge(&names(2), 64), 1).unwrap();
        let names = Params::trainable_names(Variant::B);
        let flat = s.params.flatten(&names);
        let mut p = s.params.zeros_like();
        p.assign(&names, &flat).unwrap();
        assert_eq!(p.flatten(&names), flat);
        assert!(p.assign(&names, &flat[1..]).is_err());
    }
}
