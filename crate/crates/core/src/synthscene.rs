//! Deterministic synthetic scenes and flat-shaded multi-view renderings.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camgeom::{Camera, CameraRig};
use crate::det_head::{GtBox, SceneGt};
use crate::error::{Error, Result};
use crate::numcore::seeded_rng;

/// Scene streams start here so they never collide with parameter init.
pub const SCENE_STREAM_BASE: u64 = 1 << 32;
pub const OBJECT_TOP: f64 = 1.5;
pub const BACKGROUND: f64 = 0.5;
pub const SHADING_RANGE: f64 = 2.0;
const NEAR_PLANE: f64 = 0.05;
const CENTER_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePrior {
    pub w: (f64, f64),
    pub l: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub half_extent: f64,
    /// One size prior per class.
    pub sizes: Vec<SizePrior>,
    /// Objects keep at least this range from the ego origin.
    pub min_range: f64,
    pub max_attempts: usize,
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.min_objects > self.max_objects || !(self.half_extent > 0.0) {
            return Err(Error::Config("invalid scene spec".into()));
        }
        for s in &self.sizes {
            if !(s.w.0 > 0.0 && s.w.0 <= s.w.1 && s.l.0 > 0.0 && s.l.0 <= s.l.1) {
                return Err(Error::Config(format!("invalid size prior {s:?}")));
            }
        }
        if self.min_range >= CENTER_FRACTION * self.half_extent {
            return Err(Error::Config("minimum object range leaves no room in the extent".into()));
        }
        Ok(())
    }
}

fn diagonal(b: &GtBox) -> f64 {
    b.w.hypot(b.l)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Counted-rejection sampling of a non-overlapping box layout; a pure
/// function of `(spec.seed, index)`.
pub fn gen_scene(spec: &SceneSpec, index: u64) -> Result<SceneGt> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, SCENE_STREAM_BASE + index);
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let lim = CENTER_FRACTION * spec.half_extent;
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n);
    let mut attempts = 0;
    while boxes.len() < n {
        if attempts == spec.max_attempts {
            return Err(Error::Generation(format!(
                "scene {index}: placed {} of {n} objects in {attempts} attempts",
                boxes.len()
            )));
        }
        attempts += 1;
        let class = rng.gen_range(0..spec.classes());
        let prior = spec.sizes[class];
        let w = uniform(&mut rng, prior.w);
        let l = uniform(&mut rng, prior.l);
        let mut yaw = rng.gen_range(-PI..PI);
        if yaw == -PI {
            yaw = PI;
        }
        let x = rng.gen_range(-lim..lim);
        let y = rng.gen_range(-lim..lim);
        let b = GtBox { x, y, w, l, yaw, class };
        if x.hypot(y) < spec.min_range {
            continue;
        }
        if boxes.iter().any(|o| (o.x - x).hypot(o.y - y) < (diagonal(o) + diagonal(&b)) / 2.0) {
            continue;
        }
        boxes.push(b);
    }
    Ok(SceneGt { boxes })
}

/// Row-major `[height, width, 3]` RGB image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self { width, height, data: vec![v; width * height * 3] }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary PPM dump for inspection.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
        Ok(())
    }
}

pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [[0.95, 0.25, 0.2], [0.2, 0.35, 0.95], [0.2, 0.85, 0.3], [0.95, 0.85, 0.2]];
    PALETTE[class % PALETTE.len()]
}

/// BEV footprint corners in counter-clockwise order.
pub fn footprint(b: &GtBox) -> [(f64, f64); 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, d)| (b.x + c * a - s * d, b.y + s * a + c * d))
}

/// Screen rectangle `[u0, u1] × [v0, v1]` covered by a box, if any part of
/// it lies in front of the camera.
pub fn box_rect(b: &GtBox, cam: &Camera) -> Option<(f64, f64, f64, f64)> {
    let mut poly: Vec<Vector3<f64>> = footprint(b).iter().map(|&(x, y)| cam.ego_to_camera(&Vector3::new(x, y, 0.0))).collect();
    // Clip the (horizontal) footprint against the near plane; the camera
    // y axis is vertical, so clipping commutes with the height extrusion.
    let mut clipped = Vec::with_capacity(6);
    for i in 0..poly.len() {
        let (a, b2) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a.z >= NEAR_PLANE, b2.z >= NEAR_PLANE);
        if ina {
            clipped.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a.z) / (b2.z - a.z);
            clipped.push(a + (b2 - a) * t);
        }
    }
    poly = clipped;
    if poly.is_empty() {
        return None;
    }
    let up = cam.ego_to_camera(&Vector3::new(0.0, 0.0, OBJECT_TOP)) - cam.ego_to_camera(&Vector3::zeros());
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &poly {
        for q in [*p, p + up] {
            let u = cam.fx() * q.x / q.z + cam.cx();
            let v = cam.fy() * q.y / q.z + cam.cy();
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
    }
    if u1 <= 0.0 || v1 <= 0.0 || u0 >= cam.width as f64 || v0 >= cam.height as f64 {
        return None;
    }
    Some((u0, u1, v0, v1))
}

/// Renders every camera view: upright rectangles in class color, shaded by
/// `min(1, range/distance)`, drawn far to near over a gray background.
pub fn render_views(scene: &SceneGt, rig: &CameraRig) -> Vec<Image> {
    rig.cameras
        .iter()
        .map(|cam| {
            let mut img = Image::filled(cam.width, cam.height, BACKGROUND);
            let center = cam.center();
            let mut order: Vec<(f64, usize)> = scene
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| ((b.x - center.x).hypot(b.y - center.y), i))
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (dist, i) in order {
                let b = &scene.boxes[i];
                let Some((u0, u1, v0, v1)) = box_rect(b, cam) else { continue };
                let shade = (SHADING_RANGE / dist.max(1e-9)).min(1.0);
                let color = class_color(b.class).map(|c| c * shade);
                let cols = (u0 - 0.5).ceil().max(0.0) as usize..((u1 - 0.5).floor() + 1.0).clamp(0.0, cam.width as f64) as usize;
                let rows = (v0 - 0.5).ceil().max(0.0) as usize..((v1 - 0.5).floor() + 1.0).clamp(0.0, cam.height as f64) as usize;
                for v in rows {
                    for u in cols.clone() {
                        let k = (v * cam.width + u) * 3;
                        img.data[k..k + 3].copy_from_slice(&color);
                    }
                }
            }
            img
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            seed: 7,
            min_objects: 2,
            max_objects: 6,
            half_extent: 8.0,
            sizes: vec![SizePrior { w: (0.8, 1.2), l: (1.6, 2.4) }, SizePrior { w: (0.5, 0.8), l: (0.5, 0.8) }],
            min_range: 1.5,
            max_attempts: 1000,
        }
    }

    fn rig() -> CameraRig {
        CameraRig::ring(4, 100f64.to_radians(), [0.0, 0.0, 1.0], 128, 48)
    }

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(gen_scene(&spec(), 3).unwrap(), gen_scene(&spec(), 3).unwrap());
        assert_ne!(gen_scene(&spec(), 3).unwrap(), gen_scene(&spec(), 4).unwrap());
    }

    #[test]
    fn zero_objects_gives_empty_scene() {
        let s = SceneSpec { min_objects: 0, max_objects: 0, ..spec() };
        assert!(gen_scene(&s, 0).unwrap().boxes.is_empty());
    }

    #[test]
    fn impossible_layout_is_a_generation_error() {
        let s = SceneSpec { min_objects: 200, max_objects: 200, ..spec() };
        assert_eq!(gen_scene(&s, 0).unwrap_err().kind(), "generation");
    }

    #[test]
    fn empty_scene_renders_background() {
        for img in render_views(&SceneGt::default(), &rig()) {
            assert!(img.data.iter().all(|&v| v == BACKGROUND));
        }
    }

    fn touched_columns(img: &Image) -> Vec<usize> {
        (0..img.width).filter(|&u| (0..img.height).any(|v| img.pixel(u, v) != [BACKGROUND; 3])).collect()
    }

    #[test]
    fn box_dead_ahead_only_in_front_camera() {
        let scene = SceneGt { boxes: vec![GtBox { x: 5.0, y: 0.0, w: 1.0, l: 1.0, yaw: 0.0, class: 0 }] };
        let views = render_views(&scene, &rig());
        let cols = touched_columns(&views[0]);
        assert!(!cols.is_empty());
        assert!(cols.iter().all(|&u| (50..78).contains(&u)), "{cols:?}");
        for v in &views[1..] {
            assert!(touched_columns(v).is_empty());
        }
    }

    #[test]
    fn seam_box_appears_in_both_cameras() {
        let (s, c) = (PI / 4.0).sin_cos();
        let scene = SceneGt { boxes: vec![GtBox { x: 5.0 * c, y: 5.0 * s, w: 0.6, l: 0.6, yaw: 0.0, class: 1 }] };
        let views = render_views(&scene, &rig());
        assert!(!touched_columns(&views[0]).is_empty());
        assert!(!touched_columns(&views[1]).is_empty());
        assert!(touched_columns(&views[2]).is_empty() && touched_columns(&views[3]).is_empty());
    }

    #[test]
    fn nearer_boxes_are_painted_last() {
        let far = GtBox { x: 7.0, y: 0.0, w: 2.0, l: 1.0, yaw: 0.0, class: 0 };
        let near = GtBox { x: 3.0, y: 0.0, w: 0.5, l: 0.5, yaw: 0.0, class: 1 };
        for boxes in [vec![far, near], vec![near, far]] {
            let img = &render_views(&SceneGt { boxes }, &rig())[0];
            let px = img.pixel(64, 24);
            assert!(px[2] > px[0], "{px:?}");
        }
    }
}
