//! Perspective scatter projection of point clouds into depth maps.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{norm3, Point, PointSet};

pub const DEFAULT_DISTANCE: f64 = 2.0;
pub const DEFAULT_FOV: f64 = PI / 3.0;
pub const DEFAULT_IMAGE: usize = 32;
pub const RING_ELEVATION: f64 = PI / 6.0;

/// Smallest value stored for a rendered point, keeping it distinct from background.
const MIN_RENDERED: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Point,
    pub look_at: Point,
    pub up: Point,
    pub vertical_fov: f64,
    pub height: usize,
    pub width: usize,
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point, b: &Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: Point) -> Point {
    let n = norm3(&a);
    a.map(|v| v / n)
}

impl Camera {
    pub fn new(position: Point, up: Point) -> Result<Self> {
        let cam = Self {
            position,
            look_at: [0.0; 3],
            up,
            vertical_fov: DEFAULT_FOV,
            height: DEFAULT_IMAGE,
            width: DEFAULT_IMAGE,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let view = sub(&self.look_at, &self.position);
        if norm3(&view) == 0.0 {
            return Err(Error::Parameter("camera position coincides with its target".into()));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < PI) {
            return Err(Error::Parameter(format!("field of view {} outside (0, π)", self.vertical_fov)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Parameter(format!("image {}x{} smaller than 8x8", self.height, self.width)));
        }
        if norm3(&cross(&view, &self.up)) < 1e-12 {
            return Err(Error::Parameter("camera up vector is parallel to the view direction".into()));
        }
        Ok(())
    }

    pub fn distance(&self) -> f64 {
        norm3(&sub(&self.position, &self.look_at))
    }

    /// Orthonormal (right, up, forward) basis.
    fn basis(&self) -> (Point, Point, Point) {
        let forward = unit(sub(&self.look_at, &self.position));
        let right = unit(cross(&forward, &self.up));
        let up = cross(&right, &forward);
        (right, up, forward)
    }
}

/// View count and camera distance, enough to rebuild a [`camera_rig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub views: usize,
    pub distance: f64,
}

impl Rig {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        camera_rig(self.views, self.distance)
    }
}

/// `m_views - 2` ring cameras at 30° elevation plus top and bottom when
/// `m_views >= 3`; otherwise a ring only.
pub fn camera_rig(m_views: usize, distance: f64) -> Result<Vec<Camera>> {
    if m_views == 0 {
        return Err(Error::Parameter("need at least one view".into()));
    }
    if !(distance > 1.0) || !distance.is_finite() {
        return Err(Error::Parameter(format!(
            "camera distance {distance} must exceed the unit-sphere radius"
        )));
    }
    let ring = if m_views >= 3 { m_views - 2 } else { m_views };
    let z_up = [0.0, 0.0, 1.0];
    let (ce, se) = (RING_ELEVATION.cos(), RING_ELEVATION.sin());
    let mut cams = Vec::with_capacity(m_views);
    for k in 0..ring {
        let az = 2.0 * PI * k as f64 / ring as f64;
        let pos = [distance * ce * az.cos(), distance * ce * az.sin(), distance * se];
        cams.push(Camera::new(pos, z_up)?);
    }
    if m_views >= 3 {
        cams.push(Camera::new([0.0, 0.0, distance], [0.0, 1.0, 0.0])?);
        cams.push(Camera::new([0.0, 0.0, -distance], [0.0, 1.0, 0.0])?);
    }
    Ok(cams)
}

/// Row-major depth image; 0 is background, larger is nearer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl DepthMap {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Nearest-point-wins perspective scatter. Out-of-frustum points are skipped.
pub fn project_view(ps: &PointSet, cam: &Camera) -> DepthMap {
    let (right, up, forward) = cam.basis();
    let dist = cam.distance();
    let (near, far) = (dist - 1.0, dist + 1.0);
    let focal = (cam.height as f64 / 2.0) / (cam.vertical_fov / 2.0).tan();
    let (cx, cy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    let mut map = DepthMap::blank(cam.height, cam.width);
    for p in &ps.points {
        let rel = sub(p, &cam.position);
        let depth = dot3(&rel, &forward);
        if depth <= 1e-9 {
            continue;
        }
        let px = cx + focal * dot3(&rel, &right) / depth;
        let py = cy - focal * dot3(&rel, &up) / depth;
        // Half-up rounding onto integer pixel centers.
        let (col, row) = ((px + 0.5).floor(), (py + 0.5).floor());
        if col < 0.0 || row < 0.0 || col >= cam.width as f64 || row >= cam.height as f64 {
            continue;
        }
        let value = (1.0 - (depth - near) / (far - near)).clamp(MIN_RENDERED, 1.0);
        let idx = row as usize * cam.width + col as usize;
        if value > map.pixels[idx] {
            map.pixels[idx] = value;
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub views: Vec<DepthMap>,
    pub cameras: Vec<Camera>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

pub fn project_all(ps: &PointSet, cams: &[Camera]) -> Result<ViewSet> {
    if cams.is_empty() {
        return Err(Error::Parameter("no cameras".into()));
    }
    let views = cams.par_iter().map(|c| project_view(ps, c)).collect();
    Ok(ViewSet {
        views,
        cameras: cams.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{sample_primitive, Rotation};

    fn top_camera() -> Camera {
        Camera::new([0.0, 0.0, 2.0], [0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn rig_layouts() {
        let one = camera_rig(1, 2.0).unwrap();
        assert_eq!(one.len(), 1);
        let p = one[0].position;
        assert!((p[2] - 2.0 * RING_ELEVATION.sin()).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12 && p[0] > 0.0);

        let six = camera_rig(6, 2.0).unwrap();
        assert_eq!(six.len(), 6);
        let az: Vec<f64> = six[..4].iter().map(|c| c.position[1].atan2(c.position[0]).to_degrees()).collect();
        for (a, e) in az.iter().zip([0.0, 90.0, 180.0, -90.0]) {
            assert!((a - e).abs() < 1e-9, "{az:?}");
        }
        assert_eq!(six[4].position, [0.0, 0.0, 2.0]);
        assert_eq!(six[5].position, [0.0, 0.0, -2.0]);
        assert!(six.iter().all(|c| (c.distance() - 2.0).abs() < 1e-12));

        assert_eq!(camera_rig(10, 2.0).unwrap().len(), 10);
        assert!(camera_rig(4, 1.0).is_err());
    }

    #[test]
    fn origin_lands_on_center_pixel() {
        let ps = PointSet::new(vec![[0.0; 3]], None).unwrap();
        let map = project_view(&ps, &top_camera());
        assert_eq!(map.nonzero_count(), 1);
        assert_eq!(map.get(16, 16), 0.5);
    }

    #[test]
    fn points_behind_camera_are_skipped() {
        let ps = PointSet::new(vec![[0.0, 0.0, 3.0], [0.1, 0.0, 2.5]], None).unwrap();
        assert_eq!(project_view(&ps, &top_camera()).nonzero_count(), 0);
    }

    #[test]
    fn nearest_point_wins() {
        // Depths 1.5 and 2.5 along the optical axis.
        let ps = PointSet::new(vec![[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]], None).unwrap();
        let map = project_view(&ps, &top_camera());
        assert_eq!(map.nonzero_count(), 1);
        assert!((map.get(16, 16) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pgm_header_and_values() {
        let ps = PointSet::new(vec![[0.0; 3]], None).unwrap();
        let pgm = project_view(&ps, &top_camera()).to_pgm();
        let header = b"P5\n32 32\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 1024);
        assert_eq!(pgm[header.len() + 16 * 32 + 16], 128);
    }

    #[test]
    fn ring_views_of_sphere_have_similar_coverage() {
        let s = sample_primitive(0, 1024, 3).unwrap();
        let cams = camera_rig(6, 2.0).unwrap();
        let vs = project_all(&s, &cams).unwrap();
        let a = vs.views[0].nonzero_count() as f64;
        let b = vs.views[1].nonzero_count() as f64;
        assert!((a - b).abs() / a.max(b) <= 0.05, "{a} vs {b}");
    }

    #[test]
    fn rotation_by_ring_step_permutes_views() {
        let s = sample_primitive(9, 512, 5).unwrap();
        let m = 6;
        let cams = camera_rig(m, 2.0).unwrap();
        let ring = m - 2;
        let r = Rotation::from_axis_angle([0.0, 0.0, 1.0], 2.0 * PI / ring as f64).unwrap();
        let base = project_all(&s, &cams).unwrap();
        let rotated = project_all(&s.rotated(&r), &cams).unwrap();
        for k in 0..ring {
            // Rotating the cloud forward shows camera k what camera k-1 saw.
            let a = &rotated.views[(k + 1) % ring];
            let b = &base.views[k];
            let total = b.nonzero_count().max(1);
            let matched = a
                .pixels
                .iter()
                .zip(&b.pixels)
                .filter(|(x, y)| **y > 0.0 && (**x - **y).abs() < 1e-6)
                .count();
            assert!(matched as f64 >= 0.95 * total as f64, "view {k}: {matched}/{total}");
        }
    }

    #[test]
    fn point_order_does_not_matter() {
        let s = sample_primitive(4, 300, 8).unwrap();
        let mut rev = s.clone();
        rev.points.reverse();
        let cam = &camera_rig(3, 2.0).unwrap()[0];
        assert_eq!(project_view(&s, cam), project_view(&rev, cam));
    }

    #[test]
    fn rendered_values_in_range() {
        let s = sample_primitive(1, 512, 2).unwrap();
        for cam in camera_rig(10, 2.0).unwrap() {
            let map = project_view(&s, &cam);
            assert!(map.nonzero_count() > 0);
            assert!(map.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
