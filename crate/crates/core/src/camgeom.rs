//! Pinhole multi-camera geometry.
//!
//! Ego frame: x forward, y left, z up. Camera frame: z forward, x right,
//! y down. `R` maps camera-frame directions into the ego frame and `t` is
//! the camera center in ego coordinates.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major intrinsics `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
    pub intrinsics: [[f64; 3]; 3],
    /// Row-major camera-to-ego rotation.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in the ego frame, meters.
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    /// Level camera with square pixels, centered principal point and the
    /// given horizontal field of view, looking along `heading` (radians,
    /// counter-clockwise from ego +x).
    pub fn level(hfov: f64, heading: f64, position: [f64; 3], width: usize, height: usize) -> Self {
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        let (s, c) = heading.sin_cos();
        // Columns are the ego-frame images of the camera x (right), y (down), z (forward) axes.
        let rotation = [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]];
        Self {
            intrinsics: [[f, 0.0, width as f64 / 2.0], [0.0, f, height as f64 / 2.0], [0.0, 0.0, 1.0]],
            rotation,
            translation: position,
            width,
            height,
        }
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("camera rotation is not a proper rotation".into()));
        }
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let (cx, cy) = (self.cx(), self.cy());
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err(Error::Config("principal point lies outside the image".into()));
        }
        Ok(())
    }

    /// Camera whose pixels are `stride`-sized blocks of this one; a column
    /// of the strided camera covers `stride` original columns.
    pub fn strided(&self, stride: usize) -> Self {
        let s = stride as f64;
        let mut k = self.intrinsics;
        for row in k.iter_mut().take(2) {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Self { intrinsics: k, width: self.width / stride, height: self.height / stride, ..self.clone() }
    }

    pub fn ego_to_camera(&self, p_ego: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (p_ego - self.center())
    }

    /// Ego-frame direction of the ray through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        self.rotation_matrix() * d
    }

    /// Inverse of [`project_to_image`]: the ego point at forward `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.center() + self.pixel_ray(u, v) * depth
    }

    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into_owned()
    }
}

/// Perspective projection of an ego-frame point.
pub fn project_to_image(p_ego: &Vector3<f64>, cam: &Camera) -> Result<Projection> {
    let pc = cam.ego_to_camera(p_ego);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera(pc.z));
    }
    Ok(Projection { u: cam.fx() * pc.x / pc.z + cam.cx(), v: cam.fy() * pc.y / pc.z + cam.cy(), depth: pc.z })
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Ego azimuth of the far end of a column's center ray.
pub fn column_azimuth(cam: &Camera, column: usize) -> f64 {
    let d = cam.pixel_ray(column as f64 + 0.5, cam.height as f64 / 2.0);
    wrap_angle(d.y.atan2(d.x))
}

/// Azimuth bin of `az` among `bins` equal bins; exact boundaries go to the
/// lower-index bin.
pub fn azimuth_bin(az: f64, bins: usize) -> usize {
    let x = wrap_angle(az) / TAU * bins as f64;
    let f = x.floor();
    let b = if x == f && f >= 1.0 { f as usize - 1 } else { f as usize };
    b.min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    /// Evenly spaced level cameras sharing one mount point.
    pub fn ring(n: usize, hfov: f64, position: [f64; 3], width: usize, height: usize) -> Self {
        let cameras = (0..n)
            .map(|i| Camera::level(hfov, TAU * i as f64 / n as f64, position, width, height))
            .collect();
        Self { cameras }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("camera rig is empty".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
            if cam.forward_axis().z.abs() > 1e-9 {
                return Err(Error::Config("camera optical axes must be horizontal".into()));
            }
        }
        Ok(())
    }

    pub fn strided(&self, stride: usize) -> Self {
        Self { cameras: self.cameras.iter().map(|c| c.strided(stride)).collect() }
    }
}

/// Image columns grouped by the azimuth bin their rays fall in.
#[derive(Debug, Clone, PartialEq)]
pub struct RayAssignment {
    /// Per bin, the `(camera, column)` pairs in camera-then-column order.
    pub bins: Vec<Vec<(usize, usize)>>,
    /// Per bin, the number of distinct cameras contributing columns.
    pub coverage: Vec<usize>,
}

impl RayAssignment {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }
}

pub fn assign_columns_to_rays(rig: &CameraRig, azimuth_bins: usize) -> Result<RayAssignment> {
    if azimuth_bins < 4 {
        return Err(Error::Config(format!("need at least 4 azimuth bins, got {azimuth_bins}")));
    }
    let mut bins = vec![Vec::new(); azimuth_bins];
    for (ci, cam) in rig.cameras.iter().enumerate() {
        for col in 0..cam.width {
            bins[azimuth_bin(column_azimuth(cam, col), azimuth_bins)].push((ci, col));
        }
    }
    let coverage = bins
        .iter()
        .map(|list: &Vec<(usize, usize)>| {
            let mut cams: Vec<usize> = list.iter().map(|&(c, _)| c).collect();
            cams.dedup();
            cams.len()
        })
        .collect();
    Ok(RayAssignment { bins, coverage })
}
