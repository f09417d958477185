//! Browser demo: render depth views of a synthetic primitive, watch
//! entropy-guided view selection, and compute a Sinkhorn plan between two
//! small point sets.
//!
//! The plain functions are ordinary Rust so they can be tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use ua3d_core::alignment::sinkhorn::sinkhorn_uniform;
use ua3d_core::alignment::cost_matrix;
use ua3d_core::model::{fallback_knowledge, ModelConfig, ModelState};
use ua3d_core::pointcloud::{apply_shift, normalize_unit_sphere, sample_primitive, ShiftSpec, PRIMITIVES};
use ua3d_core::projection::{camera_rig, project_all, ViewSet};
use ua3d_core::rng::{derive_seed, SplitMix64};
use ua3d_core::selection::predict_cloud;
use ua3d_core::Result;
use wasm_bindgen::prelude::*;

const DISTANCE: f64 = 2.0;
const MAX_POINTS: usize = 4096;
const MAX_VIEWS: usize = 12;
const MAX_OT_POINTS: usize = 64;

fn js(e: ua3d_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Parameters of the rendered cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub class: usize,
    pub points: usize,
    pub views: usize,
    pub jitter: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Scene {
    fn views(&self) -> Result<ViewSet> {
        if self.points > MAX_POINTS || self.views > MAX_VIEWS {
            return Err(ua3d_core::Error::Parameter(format!(
                "demo is limited to {MAX_POINTS} points and {MAX_VIEWS} views"
            )));
        }
        let clean = sample_primitive(self.class, self.points, derive_seed(self.seed, 0))?;
        let shift = ShiftSpec {
            jitter_sigma: self.jitter,
            dropout_ratio: self.dropout,
            ..ShiftSpec::identity()
        };
        let shifted = apply_shift(&clean, &shift, derive_seed(self.seed, 1))?;
        project_all(&normalize_unit_sphere(&shifted), &camera_rig(self.views, DISTANCE)?)
    }
}

pub fn class_names() -> Vec<String> {
    PRIMITIVES.iter().map(|s| s.to_string()).collect()
}

/// Depth views laid out back to back, each `side * side` values in `[0, 1]`.
pub fn render(scene: &Scene) -> Result<(usize, Vec<f64>)> {
    let vs = scene.views()?;
    let side = vs.views[0].width;
    Ok((side, vs.views.into_iter().flat_map(|v| v.pixels).collect()))
}

/// Per-view entropy under a freshly initialised model, and the views kept at
/// the given ratio.
pub fn entropy_selection(scene: &Scene, rho: f64, model_seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let vs = scene.views()?;
    let classes = class_names();
    let config = ModelConfig::new(classes.len());
    let knowledge = fallback_knowledge(&classes, config.d);
    let state = ModelState::init(config, knowledge, model_seed)?;
    let pred = predict_cloud(&vs, &state, None, rho)?;
    Ok((pred.per_view_entropy, pred.selected))
}

/// Two 2-D clouds: a source blob and a target blob moved by `(dx, 0)`.
pub fn blobs(n: usize, dx: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = SplitMix64::new(seed);
    let mut blob = |off: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![off + 0.15 * rng.normal(), 0.15 * rng.normal()])
            .collect()
    };
    let src = blob(-dx / 2.0);
    let tgt = blob(dx / 2.0);
    (src, tgt)
}

/// Uniform-marginal plan between [`blobs`], returned with its transport cost.
pub fn transport(n: usize, dx: f64, epsilon: f64, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, f64)> {
    if !(1..=MAX_OT_POINTS).contains(&n) {
        return Err(ua3d_core::Error::Parameter(format!("point count must be in 1..={MAX_OT_POINTS}")));
    }
    let (src, tgt) = blobs(n, dx, seed);
    let tp = sinkhorn_uniform(&cost_matrix(&src, &tgt)?, epsilon)?;
    Ok((src, tgt, tp.plan.into_vec(), tp.cost))
}

#[wasm_bindgen]
pub fn primitive_names() -> Vec<String> {
    class_names()
}

#[wasm_bindgen]
pub struct Views {
    side: usize,
    pixels: Vec<f64>,
    entropy: Vec<f64>,
    selected: Vec<u32>,
}

#[wasm_bindgen]
impl Views {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    pub fn entropy(&self) -> Vec<f64> {
        self.entropy.clone()
    }

    pub fn selected(&self) -> Vec<u32> {
        self.selected.clone()
    }
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn render_views(
    class: usize,
    points: usize,
    views: usize,
    jitter: f64,
    dropout: f64,
    seed: u64,
    rho: f64,
    model_seed: u64,
) -> std::result::Result<Views, JsError> {
    let scene = Scene {
        class,
        points,
        views,
        jitter,
        dropout,
        seed,
    };
    let (side, pixels) = render(&scene).map_err(js)?;
    let (entropy, selected) = entropy_selection(&scene, rho, model_seed).map_err(js)?;
    Ok(Views {
        side,
        pixels,
        entropy,
        selected: selected.into_iter().map(|i| i as u32).collect(),
    })
}

#[wasm_bindgen]
pub struct Plan {
    source: Vec<f64>,
    target: Vec<f64>,
    plan: Vec<f64>,
    cost: f64,
}

#[wasm_bindgen]
impl Plan {
    /// Interleaved `x, y` pairs.
    pub fn source(&self) -> Vec<f64> {
        self.source.clone()
    }

    pub fn target(&self) -> Vec<f64> {
        self.target.clone()
    }

    /// Row-major `n x n`.
    pub fn plan(&self) -> Vec<f64> {
        self.plan.clone()
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }
}

#[wasm_bindgen]
pub fn transport_plan(n: usize, dx: f64, epsilon: f64, seed: u64) -> std::result::Result<Plan, JsError> {
    let (src, tgt, plan, cost) = transport(n, dx, epsilon, seed).map_err(js)?;
    Ok(Plan {
        source: src.concat(),
        target: tgt.concat(),
        plan,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        Scene {
            class: 1,
            points: 256,
            views: 6,
            jitter: 0.01,
            dropout: 0.2,
            seed: 4,
        }
    }

    #[test]
    fn render_shapes() {
        let (side, px) = render(&scene()).unwrap();
        assert_eq!(px.len(), 6 * side * side);
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(px.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn selection_keeps_lowest_entropy() {
        let (h, sel) = entropy_selection(&scene(), 0.5, 0).unwrap();
        assert_eq!(h.len(), 6);
        assert_eq!(sel.len(), 3);
        let worst_kept = sel.iter().map(|&i| h[i]).fold(f64::MIN, f64::max);
        let best_dropped = (0..6).filter(|i| !sel.contains(i)).map(|i| h[i]).fold(f64::MAX, f64::min);
        assert!(worst_kept <= best_dropped);
    }

    #[test]
    fn plan_has_uniform_marginals() {
        let n = 8;
        let (_, _, plan, cost) = transport(n, 1.0, 0.05, 2).unwrap();
        for i in 0..n {
            let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
            let col: f64 = (0..n).map(|r| plan[r * n + i]).sum();
            assert!((row - 1.0 / n as f64).abs() < 1e-6);
            assert!((col - 1.0 / n as f64).abs() < 1e-6);
        }
        assert!(cost > 0.0);
    }

    #[test]
    fn limits_are_enforced() {
        let mut s = scene();
        s.points = MAX_POINTS + 1;
        assert!(render(&s).is_err());
        assert!(transport(0, 1.0, 0.05, 0).is_err());
        assert!(transport(MAX_OT_POINTS + 1, 1.0, 0.05, 0).is_err());
    }
}
