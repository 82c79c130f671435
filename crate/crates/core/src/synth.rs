//! Ray-traced planar scenes with known depth, for tests and demos.
//!
//! Images are rendered by intersecting each camera ray with the plane and
//! evaluating a smooth texture at the hit point, so they do not share any
//! code path with the inverse warp in [`crate::camera`].

use nalgebra::Vector3;

use crate::camera::{Intrinsics, Pose};
use crate::imaging::{DepthMap, Image};

/// A textured plane `n · P = offset` in the reference camera frame.
#[derive(Debug, Clone)]
pub struct PlaneScene {
    pub height: usize,
    pub width: usize,
    pub k: Intrinsics,
    pub normal: Vector3<f64>,
    pub offset: f64,
    /// `(wave vector, amplitude)` pairs in reference-frame units.
    waves: Vec<(Vector3<f64>, f64)>,
    /// Scene-wide intensity multiplier; 0 renders a flat gray plane.
    pub contrast: f64,
}

impl PlaneScene {
    fn intrinsics(height: usize, width: usize) -> Intrinsics {
        let f = 0.9 * width as f64;
        Intrinsics { fx: f, fy: f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
    }

    /// Texture with wavelengths of roughly 7 to 30 pixels at `depth`.
    fn waves(k: &Intrinsics, depth: f64) -> Vec<(Vector3<f64>, f64)> {
        let metres_per_px = depth / k.fx;
        [(9.0, 0.3, 0.11), (13.0, 1.9, 0.08), (23.0, 0.9, 0.07), (31.0, 2.6, 0.06), (7.0, 1.2, 0.04)]
            .iter()
            .map(|&(wavelength_px, angle, amp): &(f64, f64, f64)| {
                let kmag = std::f64::consts::TAU / (wavelength_px * metres_per_px);
                (Vector3::new(angle.cos() * kmag, angle.sin() * kmag, 0.0), amp)
            })
            .collect()
    }

    /// Plane perpendicular to the optical axis at `depth`.
    pub fn fronto_parallel(height: usize, width: usize, depth: f64) -> Self {
        let k = Self::intrinsics(height, width);
        Self {
            height,
            width,
            waves: Self::waves(&k, depth),
            k,
            normal: Vector3::z(),
            offset: depth,
            contrast: 1.0,
        }
    }

    /// Plane through `(0, 0, depth)` tilted so depth grows toward the bottom
    /// of the frame.
    pub fn slanted(height: usize, width: usize, depth: f64) -> Self {
        let k = Self::intrinsics(height, width);
        let normal = Vector3::new(0.1, -0.35, 1.0).normalize();
        Self {
            height,
            width,
            waves: Self::waves(&k, depth),
            k,
            offset: normal.z * depth,
            normal,
            contrast: 1.0,
        }
    }

    pub fn textureless(mut self) -> Self {
        self.contrast = 0.0;
        self
    }

    fn texture(&self, p: &Vector3<f64>, channel: usize) -> f64 {
        let phase = channel as f64 * 0.9;
        let v: f64 = self
            .waves
            .iter()
            .enumerate()
            .map(|(i, (kv, amp))| amp * (kv.dot(p) + phase * (i as f64 + 1.0)).sin())
            .sum();
        (0.5 + self.contrast * v).clamp(0.0, 1.0)
    }

    /// Hit point (reference frame) and depth along the camera z axis for
    /// pixel `(u, v)` of a camera with pose `ref -> cam`.
    fn cast(&self, pose: &Pose, u: f64, v: f64) -> Option<(Vector3<f64>, f64)> {
        let rt = pose.rotation().transpose();
        let center = -(rt * pose.translation());
        let ray = rt * self.k.unproject(u, v);
        let denom = self.normal.dot(&ray);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = (self.offset - self.normal.dot(&center)) / denom;
        (lambda > 0.0).then(|| (center + ray * lambda, lambda))
    }

    /// RGB view from a camera whose pose maps reference coordinates into its own.
    pub fn render(&self, pose: &Pose) -> Image {
        Image::from_fn(self.height, self.width, 3, |x, y, c| {
            self.cast(pose, x as f64, y as f64).map_or(0.0, |(p, _)| self.texture(&p, c))
        })
    }

    /// Ground-truth depth for the same camera.
    pub fn depth(&self, pose: &Pose) -> DepthMap {
        DepthMap::from_fn(self.height, self.width, |x, y| {
            self.cast(pose, x as f64, y as f64).map_or(f64::NAN, |(_, z)| z)
        })
    }
}
