//! Point-cloud ingestion, normalization and the seeded synthetic
//! domain-shift benchmark.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointSet {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("point set has no points".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_radius(&self) -> f64 {
        self.points.iter().map(norm3).fold(0.0, f64::max)
    }

    pub fn rotated(&self, r: &Rotation) -> PointSet {
        PointSet {
            points: self.points.iter().map(|p| r.apply(p)).collect(),
            label: self.label,
        }
    }
}

pub(crate) fn norm3(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// 3x3 rotation matrix built from an axis and an angle (Rodrigues).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub fn identity() -> Self {
        Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn from_axis_angle(axis: Point, angle: f64) -> Result<Self> {
        let n = norm3(&axis);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Parameter("rotation axis must be a nonzero vector".into()));
        }
        let [x, y, z] = axis.map(|v| v / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Ok(Rotation([
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ]))
    }

    pub fn apply(&self, p: &Point) -> Point {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }
}

/// Points with `normal · x < offset` are removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: Point,
    pub offset: f64,
}

impl HalfSpace {
    pub fn occludes(&self, p: &Point) -> bool {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] < self.offset
    }
}

/// Corruption applied to target-domain samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub axis: Point,
    /// Radians, in `[0, 2π]`.
    pub angle: f64,
    pub jitter_sigma: f64,
    pub dropout_ratio: f64,
    pub occlusion: Option<HalfSpace>,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
            jitter_sigma: 0.0,
            dropout_ratio: 0.0,
            occlusion: None,
        }
    }

    /// Shift used by the standard benchmark: sensor-like jitter plus point dropout.
    pub fn standard() -> Self {
        Self {
            jitter_sigma: 0.02,
            dropout_ratio: 0.3,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::Parameter(format!("jitter sigma {} must be >= 0", self.jitter_sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::Parameter(format!("dropout ratio {} outside [0, 1)", self.dropout_ratio)));
        }
        if !(0.0..=TAU).contains(&self.angle) {
            return Err(Error::Parameter(format!("rotation angle {} outside [0, 2π]", self.angle)));
        }
        if norm3(&self.axis) == 0.0 {
            return Err(Error::Parameter("rotation axis must be nonzero".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && self.jitter_sigma == 0.0 && self.dropout_ratio == 0.0 && self.occlusion.is_none()
    }
}

/// Minimum number of points a shifted sample must keep.
pub const MIN_SHIFTED_POINTS: usize = 8;

/// Rotate, jitter, drop out, then occlude.
pub fn apply_shift(ps: &PointSet, shift: &ShiftSpec, seed: u64) -> Result<PointSet> {
    shift.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut points = ps.points.clone();
    if shift.angle != 0.0 {
        let r = Rotation::from_axis_angle(shift.axis, shift.angle)?;
        points.iter_mut().for_each(|p| *p = r.apply(p));
    }
    if shift.jitter_sigma > 0.0 {
        for p in &mut points {
            for c in p.iter_mut() {
                *c += shift.jitter_sigma * rng.normal();
            }
        }
    }
    if shift.dropout_ratio > 0.0 {
        let drop = (shift.dropout_ratio * points.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..points.len()).collect();
        rng.shuffle(&mut order);
        let mut keep = vec![true; points.len()];
        for &i in &order[..drop] {
            keep[i] = false;
        }
        points = points.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();
    }
    if let Some(plane) = &shift.occlusion {
        points.retain(|p| !plane.occludes(p));
    }
    if points.len() < MIN_SHIFTED_POINTS {
        return Err(Error::Degenerate(format!(
            "shift leaves {} points, need at least {MIN_SHIFTED_POINTS}",
            points.len()
        )));
    }
    Ok(PointSet {
        points,
        label: ps.label,
    })
}

/// Center at the origin and scale the farthest point to radius 1.
/// A set whose points all coincide collapses to the origin.
pub fn normalize_unit_sphere(ps: &PointSet) -> PointSet {
    let c = ps.centroid();
    let mut points: Vec<Point> = ps.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let r = points.iter().map(norm3).fold(0.0, f64::max);
    if r > 0.0 {
        points.iter_mut().for_each(|p| *p = p.map(|v| v / r));
    } else {
        points.iter_mut().for_each(|p| *p = [0.0; 3]);
    }
    PointSet {
        points,
        label: ps.label,
    }
}

// ---------------------------------------------------------------------------
// xyz text format

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointSet> {
    let mut label = None;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if let Some(header) = line.strip_prefix('#') {
            let mut it = header.split_whitespace();
            if it.next() == Some("label") {
                let v = it.next().ok_or_else(|| parse_err("label header without value".into()))?;
                label = Some(v.parse::<usize>().map_err(|e| parse_err(format!("bad label {v:?}: {e}")))?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| parse_err(format!("invalid coordinate {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite coordinate {f:?}")));
            }
            p[k] = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Degenerate(format!("{} contains no points", path.display())));
    }
    Ok(PointSet { points, label })
}

pub fn load_pointset(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

pub fn format_xyz(ps: &PointSet, label: Option<usize>) -> String {
    let mut out = String::with_capacity(ps.points.len() * 48);
    if let Some(l) = label {
        let _ = writeln!(out, "# label {l}");
    }
    for p in &ps.points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}

pub fn save_pointset(path: impl AsRef<Path>, ps: &PointSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_xyz(ps, ps.label)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic primitives

pub const PRIMITIVES: [&str; 10] = [
    "sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane", "helix", "cross", "l_bracket",
];

type Aabb = ([f64; 3], [f64; 3]);

fn sample_box_union(boxes: &[Aabb], rng: &mut SplitMix64) -> Point {
    // Faces of every box, weighted by area; points buried inside another box are rejected.
    let mut faces: Vec<(usize, usize, f64, f64)> = Vec::new(); // (box, face, area, cumulative)
    let mut total = 0.0;
    for (b, (lo, hi)) in boxes.iter().enumerate() {
        let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        for f in 0..6 {
            let axis = f / 2;
            let area = ext[(axis + 1) % 3] * ext[(axis + 2) % 3];
            total += area;
            faces.push((b, f, area, total));
        }
    }
    loop {
        let u = rng.next_f64() * total;
        let &(b, f, _, _) = faces.iter().find(|x| u < x.3).unwrap_or(faces.last().unwrap());
        let (lo, hi) = boxes[b];
        let axis = f / 2;
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = rng.uniform(lo[k], hi[k]);
        }
        p[axis] = if f % 2 == 0 { lo[axis] } else { hi[axis] };
        let buried = boxes.iter().enumerate().any(|(o, (l, h))| {
            o != b && (0..3).all(|k| p[k] > l[k] + 1e-12 && p[k] < h[k] - 1e-12)
        });
        if !buried {
            return p;
        }
    }
}

fn sample_triangle(a: Point, b: Point, c: Point, rng: &mut SplitMix64) -> Point {
    let r1 = rng.next_f64().sqrt();
    let r2 = rng.next_f64();
    let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
    [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
}

fn tri_area(a: Point, b: Point, c: Point) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cr = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * norm3(&cr)
}

fn sample_primitive_point(class: usize, rng: &mut SplitMix64) -> Point {
    match class {
        // sphere
        0 => loop {
            let p = [rng.normal(), rng.normal(), rng.normal()];
            let n = norm3(&p);
            if n > 1e-12 {
                return p.map(|v| v / n);
            }
        },
        // cube
        1 => sample_box_union(&[([-1.0; 3], [1.0; 3])], rng),
        // cylinder: radius 0.5, height 2, with caps
        2 => {
            let (r, h) = (0.5, 2.0);
            let side = TAU * r * h;
            let caps = 2.0 * PI * r * r;
            let theta = rng.uniform(0.0, TAU);
            if rng.next_f64() * (side + caps) < side {
                [r * theta.cos(), r * theta.sin(), rng.uniform(-1.0, 1.0)]
            } else {
                let rad = r * rng.next_f64().sqrt();
                let z = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                [rad * theta.cos(), rad * theta.sin(), z]
            }
        }
        // cone: base radius 0.8 at z=-0.8, apex at z=0.8
        3 => {
            let (r, h) = (0.8f64, 1.6f64);
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            let theta = rng.uniform(0.0, TAU);
            if rng.next_f64() * (lateral + base) < lateral {
                let t = rng.next_f64().sqrt();
                [r * t * theta.cos(), r * t * theta.sin(), 0.8 - h * t]
            } else {
                let rad = r * rng.next_f64().sqrt();
                [rad * theta.cos(), rad * theta.sin(), -0.8]
            }
        }
        // torus: major 0.8, minor 0.25, lying in the xy-plane
        4 => {
            let (big, small) = (0.8, 0.25);
            loop {
                let u = rng.uniform(0.0, TAU);
                let v = rng.uniform(0.0, TAU);
                if rng.next_f64() * (big + small) <= big + small * v.cos() {
                    let ring = big + small * v.cos();
                    return [ring * u.cos(), ring * u.sin(), small * v.sin()];
                }
            }
        }
        // square pyramid: base 1.6 at z=-0.7, apex (0,0,0.7)
        5 => {
            let b = 0.8;
            let apex = [0.0, 0.0, 0.7];
            let corners = [[-b, -b, -0.7], [b, -b, -0.7], [b, b, -0.7], [-b, b, -0.7]];
            let mut tris: Vec<(Point, Point, Point)> =
                (0..4).map(|i| (corners[i], corners[(i + 1) % 4], apex)).collect();
            tris.push((corners[0], corners[1], corners[2]));
            tris.push((corners[0], corners[2], corners[3]));
            let areas: Vec<f64> = tris.iter().map(|t| tri_area(t.0, t.1, t.2)).collect();
            let total: f64 = areas.iter().sum();
            let mut u = rng.next_f64() * total;
            let mut pick = tris.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if u < *a {
                    pick = i;
                    break;
                }
                u -= a;
            }
            let t = tris[pick];
            sample_triangle(t.0, t.1, t.2, rng)
        }
        // thin rectangular plate
        6 => sample_box_union(&[([-1.0, -0.6, -0.03], [1.0, 0.6, 0.03])], rng),
        // helix tube: radius 0.6, 2.5 turns, tube radius 0.08
        7 => {
            let turns = 2.5;
            let t = rng.next_f64();
            let angle = TAU * turns * t;
            let center = [0.6 * angle.cos(), 0.6 * angle.sin(), 2.0 * t - 1.0];
            let radial = [angle.cos(), angle.sin(), 0.0];
            let up = [0.0, 0.0, 1.0];
            let phi = rng.uniform(0.0, TAU);
            let tube = 0.08;
            [0, 1, 2].map(|k| center[k] + tube * (phi.cos() * radial[k] + phi.sin() * up[k]))
        }
        // 3D cross of two bars
        8 => sample_box_union(
            &[([-1.0, -0.2, -0.2], [1.0, 0.2, 0.2]), ([-0.2, -1.0, -0.2], [0.2, 1.0, 0.2])],
            rng,
        ),
        // L-bracket
        _ => sample_box_union(
            &[([-0.8, -0.3, -1.0], [-0.4, 0.3, 1.0]), ([-0.8, -0.3, -1.0], [0.8, 0.3, -0.6])],
            rng,
        ),
    }
}

/// Uniform surface sampling of primitive `class`, normalized to the unit sphere.
pub fn sample_primitive(class: usize, n_points: usize, seed: u64) -> Result<PointSet> {
    if class >= PRIMITIVES.len() {
        return Err(Error::Parameter(format!("no primitive with index {class}")));
    }
    if n_points == 0 {
        return Err(Error::Parameter("need at least one point".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let points = (0..n_points).map(|_| sample_primitive_point(class, &mut rng)).collect();
    Ok(normalize_unit_sphere(&PointSet {
        points,
        label: Some(class),
    }))
}

// ---------------------------------------------------------------------------
// Hidden target labels

/// Ground-truth target labels kept away from the training path. Every read
/// through [`HiddenLabels::reveal`] is counted.
#[derive(Debug, Default)]
pub struct HiddenLabels {
    labels: Vec<Option<usize>>,
    reads: AtomicUsize,
}

impl Clone for HiddenLabels {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::SeqCst)),
        }
    }
}

impl HiddenLabels {
    pub fn new(labels: Vec<Option<usize>>) -> Self {
        Self {
            labels,
            reads: AtomicUsize::new(0),
        }
    }

    /// Labels for evaluation only.
    pub fn reveal(&self) -> &[Option<usize>] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    pub fn access_count(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unlabeled target domain; ground truth is only reachable via [`HiddenLabels`].
#[derive(Debug, Clone)]
pub struct TargetDomain {
    clouds: Vec<PointSet>,
    pub hidden: HiddenLabels,
}

impl TargetDomain {
    pub fn new(clouds: Vec<PointSet>, labels: Vec<Option<usize>>) -> Result<Self> {
        if clouds.len() != labels.len() {
            return Err(Error::Dataset(format!("{} target clouds but {} labels", clouds.len(), labels.len())));
        }
        let clouds = clouds.into_iter().map(|c| PointSet { label: None, ..c }).collect();
        Ok(Self {
            clouds,
            hidden: HiddenLabels::new(labels),
        })
    }

    pub fn clouds(&self) -> &[PointSet] {
        &self.clouds
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub classes: Vec<String>,
    pub source: Vec<PointSet>,
    pub target: TargetDomain,
}

const TARGET_STREAM: u64 = 0x7A3C_E1D5_0B96_4F21;

/// Target samples generated per class by [`standard_benchmark`].
pub const STANDARD_SAMPLES_PER_CLASS: usize = 32;

/// Five classes, 512 points per cloud, [`ShiftSpec::standard`].
pub fn standard_benchmark(seed: u64) -> Result<Benchmark> {
    generate_benchmark(5, STANDARD_SAMPLES_PER_CLASS, 512, &ShiftSpec::standard(), seed)
}

/// Seeded source/target benchmark. Target sample `i` is source sample `i`'s
/// generator output followed by `shift`.
pub fn generate_benchmark(
    classes: usize,
    samples_per_class: usize,
    points_per_sample: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<Benchmark> {
    if classes < 2 || classes > PRIMITIVES.len() {
        return Err(Error::Parameter(format!(
            "classes must be in 2..={}, got {classes}",
            PRIMITIVES.len()
        )));
    }
    if samples_per_class == 0 || points_per_sample == 0 {
        return Err(Error::Parameter("samples_per_class and points_per_sample must be positive".into()));
    }
    shift.validate()?;
    let total = classes * samples_per_class;
    let pairs: Vec<(PointSet, PointSet)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let class = i / samples_per_class;
            let clean = sample_primitive(class, points_per_sample, derive_seed(seed, i as u64))?;
            let shifted = if shift.is_identity() {
                clean.clone()
            } else {
                apply_shift(&clean, shift, derive_seed(seed ^ TARGET_STREAM, i as u64))?
            };
            Ok((clean, shifted))
        })
        .collect::<Result<_>>()?;
    let (source, target): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let labels = target.iter().map(|t| t.label).collect();
    Ok(Benchmark {
        classes: PRIMITIVES[..classes].iter().map(|s| s.to_string()).collect(),
        source,
        target: TargetDomain::new(target, labels)?,
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub domain: DomainTag,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub samples: Vec<ManifestEntry>,
    /// Sidecar holding target ground truth, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_labels: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TargetLabelFile {
    labels: Vec<Option<usize>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TARGET_LABELS_FILE: &str = "target_labels.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `source/*.xyz`, `target/*.xyz`, the manifest and the target label sidecar.
pub fn write_benchmark(dir: impl AsRef<Path>, bench: &Benchmark) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["source", "target"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut samples = Vec::new();
    for (i, ps) in bench.source.iter().enumerate() {
        let rel = format!("source/{i:05}.xyz");
        save_pointset(dir.join(&rel), ps)?;
        samples.push(ManifestEntry {
            path: rel,
            domain: DomainTag::Source,
            label: ps.label,
        });
    }
    for (i, ps) in bench.target.clouds().iter().enumerate() {
        let rel = format!("target/{i:05}.xyz");
        fs::write(dir.join(&rel), format_xyz(ps, None)).map_err(|e| Error::io(dir.join(&rel), e))?;
        samples.push(ManifestEntry {
            path: rel,
            domain: DomainTag::Target,
            label: None,
        });
    }
    write_json(
        &dir.join(TARGET_LABELS_FILE),
        &TargetLabelFile {
            labels: bench.target.hidden.reveal().to_vec(),
        },
    )?;
    let manifest = Manifest {
        classes: bench.classes.clone(),
        samples,
        target_labels: Some(TARGET_LABELS_FILE.to_string()),
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads every sample listed in a manifest. Target ground truth is read from
/// the sidecar (if any) straight into [`HiddenLabels`].
pub fn load_benchmark(manifest_path: impl AsRef<Path>) -> Result<Benchmark> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut source = Vec::new();
    let mut target = Vec::new();
    for entry in &manifest.samples {
        let mut ps = load_pointset(root.join(&entry.path))?;
        match entry.domain {
            DomainTag::Source => {
                ps.label = entry.label.or(ps.label);
                if ps.label.is_none() {
                    return Err(Error::Dataset(format!("source sample {} has no label", entry.path)));
                }
                source.push(ps);
            }
            DomainTag::Target => {
                ps.label = None;
                target.push(ps);
            }
        }
    }
    let labels = match &manifest.target_labels {
        Some(rel) => {
            let p = root.join(rel);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let file: TargetLabelFile =
                serde_json::from_str(&text).map_err(|e| Error::Json { path: p.clone(), source: e })?;
            file.labels
        }
        None => vec![None; target.len()],
    };
    Ok(Benchmark {
        classes: manifest.classes,
        source,
        target: TargetDomain::new(target, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(points: &[Point]) -> PointSet {
        PointSet::new(points.to_vec(), None).unwrap()
    }

    #[test]
    fn parses_points_and_label() {
        let p = parse_xyz("# label 3\n0 0 0\n1 0 0\n", Path::new("a.xyz")).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.label, Some(3));
    }

    #[test]
    fn parse_error_names_line() {
        let err = parse_xyz("0 0 abc\n", Path::new("bad.xyz")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_xyz("0 0 0\n1 2\n", Path::new("bad.xyz")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(parse_xyz("# label 1\n", Path::new("e.xyz")), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_symmetric_pair() {
        let n = normalize_unit_sphere(&ps(&[[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]));
        assert_eq!(n.points, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_collapses() {
        let n = normalize_unit_sphere(&ps(&[[5.0, 5.0, 5.0]]));
        assert_eq!(n.points, vec![[0.0; 3]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let s = sample_primitive(3, 200, 9).unwrap();
        let again = normalize_unit_sphere(&s);
        for (a, b) in s.points.iter().zip(&again.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        assert!((s.max_radius() - 1.0).abs() < 1e-12);
        assert!(s.centroid().iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn identity_shift_is_noop() {
        let s = sample_primitive(0, 64, 1).unwrap();
        assert_eq!(apply_shift(&s, &ShiftSpec::identity(), 5).unwrap(), s);
    }

    #[test]
    fn full_turn_is_noop() {
        let s = sample_primitive(1, 64, 1).unwrap();
        let shift = ShiftSpec {
            axis: [0.3, -1.0, 0.2],
            angle: TAU,
            ..ShiftSpec::identity()
        };
        let r = apply_shift(&s, &shift, 2).unwrap();
        for (a, b) in s.points.iter().zip(&r.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn occlusion_keeps_upper_half() {
        let s = sample_primitive(0, 512, 4).unwrap();
        let shift = ShiftSpec {
            occlusion: Some(HalfSpace {
                normal: [0.0, 0.0, 1.0],
                offset: 0.0,
            }),
            ..ShiftSpec::identity()
        };
        let r = apply_shift(&s, &shift, 0).unwrap();
        assert!(r.points.iter().all(|p| p[2] >= 0.0));
        assert!(r.len() < s.len());
        assert_eq!(r.label, s.label);
    }

    #[test]
    fn dropout_count_is_floor() {
        let s = sample_primitive(2, 1024, 4).unwrap();
        let shift = ShiftSpec {
            dropout_ratio: 0.5,
            ..ShiftSpec::identity()
        };
        assert_eq!(apply_shift(&s, &shift, 1).unwrap().len(), 512);
        let shift = ShiftSpec {
            dropout_ratio: 0.3,
            ..ShiftSpec::identity()
        };
        assert_eq!(apply_shift(&s, &shift, 1).unwrap().len(), 1024 - 307);
    }

    #[test]
    fn total_occlusion_is_degenerate() {
        let s = sample_primitive(0, 64, 4).unwrap();
        let shift = ShiftSpec {
            occlusion: Some(HalfSpace {
                normal: [0.0, 0.0, 1.0],
                offset: 5.0,
            }),
            ..ShiftSpec::identity()
        };
        assert!(matches!(apply_shift(&s, &shift, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn invalid_shift_parameters() {
        let bad = ShiftSpec {
            dropout_ratio: 1.0,
            ..ShiftSpec::identity()
        };
        assert!(bad.validate().is_err());
        let bad = ShiftSpec {
            jitter_sigma: -0.1,
            ..ShiftSpec::identity()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn benchmark_zero_shift_pairs_match() {
        let b = generate_benchmark(3, 2, 64, &ShiftSpec::identity(), 7).unwrap();
        assert_eq!(b.source.len(), 6);
        for (s, t) in b.source.iter().zip(b.target.clouds()) {
            assert_eq!(s.points, t.points);
            assert_eq!(t.label, None);
        }
        assert_eq!(b.target.hidden.access_count(), 0);
    }

    #[test]
    fn benchmark_rejects_too_many_classes() {
        assert!(matches!(
            generate_benchmark(11, 1, 16, &ShiftSpec::identity(), 0),
            Err(Error::Parameter(_))
        ));
        assert!(generate_benchmark(1, 1, 16, &ShiftSpec::identity(), 0).is_err());
    }

    #[test]
    fn benchmark_is_deterministic() {
        let shift = ShiftSpec {
            angle: 0.5,
            jitter_sigma: 0.01,
            dropout_ratio: 0.25,
            ..ShiftSpec::identity()
        };
        let a = generate_benchmark(4, 3, 128, &shift, 99).unwrap();
        let b = generate_benchmark(4, 3, 128, &shift, 99).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target.clouds(), b.target.clouds());
        assert!(a.target.clouds().iter().all(|t| t.len() == 96));
    }

    #[test]
    fn every_primitive_is_normalized() {
        for class in 0..PRIMITIVES.len() {
            let s = sample_primitive(class, 256, class as u64).unwrap();
            assert_eq!(s.len(), 256);
            assert!((s.max_radius() - 1.0).abs() < 1e-9, "{}", PRIMITIVES[class]);
        }
    }
}
