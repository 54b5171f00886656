//! Pinhole cameras and surround rigs.
//!
//! Camera frame: x right, y down, z forward (optical axis). Extrinsics map
//! camera coordinates into the ego frame (x forward, y left, z up):
//! `p_ego = R · p_cam + t`.
//!
//! Image coordinates are continuous, with pixel `i` covering `[i, i + 1)`.
//! A stride-`n` feature cell `u` therefore covers image `[u·n, (u+1)·n)` and
//! is centered at `(u + 0.5)·n`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    /// camera → ego rotation
    pub rotation: Matrix3<f64>,
    /// camera center in the ego frame, meters
    pub translation: Vector3<f64>,
}

/// A point projected into an image: continuous pixel position plus depth
/// along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                intrinsics.fx, intrinsics.fy
            )));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("extrinsic rotation is not orthonormal (error {err:e})")));
        }
        Ok(Self { intrinsics, rotation, translation })
    }

    /// Horizontal camera at `position` looking along ego yaw angle `yaw`
    /// (radians, counter-clockwise from ego +x).
    pub fn looking(intrinsics: Intrinsics, yaw: f64, position: Vector3<f64>) -> Self {
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(intrinsics, rotation, position).expect("yaw rotation is orthonormal")
    }

    pub fn ego_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_ego(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Projects an ego point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Projection> {
        let c = self.ego_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some(Projection {
            x: k.fx * c.x / c.z + k.cx,
            y: k.fy * c.y / c.z + k.cy,
            depth: c.z,
        })
    }

    /// Ego point at optical-axis depth `depth` behind image position `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let c = Vector3::new((x - k.cx) / k.fx * depth, (y - k.cy) / k.fy * depth, depth);
        self.camera_to_ego(&c)
    }

    /// Unit ray direction in the ego frame through image position `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        (self.rotation * Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)).normalize()
    }
}

/// Image-space center of feature cell `u` at stride `n`.
pub fn feature_to_image(u: f64, stride: usize) -> f64 {
    (u + 0.5) * stride as f64
}

/// Continuous feature-map coordinate of image position `x` at stride `n`.
pub fn image_to_feature(x: f64, stride: usize) -> f64 {
    x / stride as f64 - 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraRig {
    /// `count` cameras evenly spaced in yaw starting at ego +x, each with
    /// horizontal field of view `hfov` (radians), mounted at `height` m and
    /// offset `radius` m from the ego origin.
    pub fn surround(count: usize, image_width: usize, image_height: usize, hfov: f64, height: f64, radius: f64) -> Self {
        let fx = image_width as f64 / 2.0 / (hfov / 2.0).tan();
        let intrinsics = Intrinsics {
            fx,
            fy: fx,
            cx: image_width as f64 / 2.0,
            cy: image_height as f64 / 2.0,
        };
        let cameras = (0..count)
            .map(|i| {
                let yaw = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                let pos = Vector3::new(radius * yaw.cos(), radius * yaw.sin(), height);
                CameraModel::looking(intrinsics, yaw, pos)
            })
            .collect();
        Self { cameras, image_width, image_height }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}
