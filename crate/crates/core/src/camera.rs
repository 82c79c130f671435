//! Pinhole geometry: inverse-warp view synthesis, backprojection, and the
//! rotate-then-center-crop transform used to build rotated training pairs.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::imaging::{bilinear_sample, sample_into, DepthMap, Image, Mask};

pub use crate::imaging::CoordField;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return param(format!(
                "intrinsics are not invertible: fx={}, fy={}, cx={}, cy={}",
                self.fx, self.fy, self.cx, self.cy
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Ray through pixel `(u, v)` with unit z.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid transform mapping target-camera coordinates into source-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-6;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ROTATION_TOL) || (det - 1.0).abs() > ROTATION_TOL {
            return param(format!(
                "pose rotation is not a proper rotation (orthogonality error {ortho:e}, det {det})"
            ));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return param("pose translation is not finite");
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation of `angle` radians about `axis`, then translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self { rotation: *r.matrix(), translation: t }
    }

    /// Parses a 4x4 homogeneous matrix given row by row.
    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let bottom = rows[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return param(format!("pose matrix bottom row must be [0,0,0,1], got {bottom:?}"));
        }
        let r = Matrix3::from_fn(|i, j| rows[i][j]);
        let t = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(r, t)
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_homogeneous();
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        rows
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Per-pixel camera-frame points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub height: usize,
    pub width: usize,
    pub xyz: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

/// For each target pixel, the continuous source coordinate it maps to under
/// `K · T · D(p) · K⁻¹ · p`.
///
/// Evaluated as a displacement `p_s - p_t` so that an identity pose yields
/// the integer grid exactly. Holes and points landing at `z <= 0` in the
/// source camera are marked invalid.
pub fn reproject(depth_t: &DepthMap, pose_ts: &Pose, k: &Intrinsics) -> Result<CoordField> {
    k.validate()?;
    let (h, w) = (depth_t.height(), depth_t.width());
    let kmat = k.matrix();
    let a = kmat * (pose_ts.rotation - Matrix3::identity()) * k.inverse_matrix();
    let kt = kmat * pose_ts.translation;
    let tz = pose_ts.translation.z;

    let mut field = CoordField::identity(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth_t.get(x, y);
            if !depth_t.is_valid(x, y) || d <= 0.0 {
                field.valid[i] = false;
                continue;
            }
            let (u, v) = (x as f64, y as f64);
            let ap = a * Vector3::new(u, v, 1.0);
            let dz = d * ap.z + tz;
            let z = d + dz;
            if !(z > 0.0) {
                field.valid[i] = false;
                continue;
            }
            field.u[i] = u + (d * ap.x + kt.x - u * dz) / z;
            field.v[i] = v + (d * ap.y + kt.y - v * dz) / z;
        }
    }
    Ok(field)
}

/// Inverse-warps `src` into the target view.
///
/// The mask is sampling validity combined with positive-depth validity.
pub fn synthesize_view(
    src: &Image,
    depth_t: &DepthMap,
    pose_ts: &Pose,
    k: &Intrinsics,
) -> Result<(Image, Mask)> {
    depth_t.check_shape(src.height(), src.width(), "synthesize_view")?;
    let coords = reproject(depth_t, pose_ts, k)?;
    bilinear_sample(src, &coords)
}

/// `D(p) · K⁻¹ · (u, v, 1)` for every pixel; holes produce zero points.
pub fn backproject_points(depth: &DepthMap, k: &Intrinsics) -> Result<PointMap> {
    k.validate()?;
    let (h, w) = (depth.height(), depth.width());
    let mut xyz = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let ok = depth.is_valid(x, y) && depth.get(x, y) > 0.0;
            xyz.push(if ok {
                k.unproject(x as f64, y as f64) * depth.get(x, y)
            } else {
                Vector3::zeros()
            });
            valid.push(ok);
        }
    }
    Ok(PointMap { height: h, width: w, xyz, valid })
}

/// Rotation angle for one rotated training pair, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub theta: f64,
    pub gamma: f64,
}

impl RotationSpec {
    pub fn new(theta: f64, gamma: f64) -> Result<Self> {
        if !theta.is_finite() || !gamma.is_finite() || gamma < 0.0 {
            return param(format!("invalid rotation range gamma={gamma}"));
        }
        if theta.abs() > gamma {
            return param(format!("rotation {theta} outside [-{gamma}, {gamma}]"));
        }
        Ok(Self { theta, gamma })
    }

    /// Maps `unit ∈ [0, 1)` uniformly onto `[-gamma, gamma]`.
    pub fn from_unit(gamma: f64, unit: f64) -> Result<Self> {
        Self::new(-gamma + 2.0 * gamma * unit.clamp(0.0, 1.0), gamma)
    }
}

/// Splits `theta` into a whole number of counter-clockwise quarter turns and
/// a residual in `(-45°, 45°]`.
pub fn split_rotation(theta: f64) -> (i64, f64) {
    let quarters = ((theta - 45.0) / 90.0).ceil();
    (quarters as i64, theta - 90.0 * quarters)
}

/// Output size of rotation by `theta` degrees followed by the largest
/// centered crop free of out-of-image pixels.
pub fn crop_dims(height: usize, width: usize, theta: f64) -> Result<(usize, usize)> {
    if !theta.is_finite() {
        return Err(Error::Geometry(format!("rotation angle {theta} is not finite")));
    }
    let (quarters, residual) = split_rotation(theta);
    let (hh, ww) = if quarters.rem_euclid(2) == 1 { (width, height) } else { (height, width) };
    if residual == 0.0 {
        return Ok((hh, ww));
    }
    let t = residual.abs().to_radians();
    if residual.abs() >= 45.0 {
        return Err(Error::Geometry(format!(
            "residual rotation {residual}° leaves no inscribed rectangle"
        )));
    }
    let (s, c, c2) = (t.sin(), t.cos(), (2.0 * t).cos());
    let (hf, wf) = (hh as f64, ww as f64);
    let h = ((hf * c - wf * s) / c2).floor();
    let w = ((wf * c - hf * s) / c2).floor();
    if h < 1.0 || w < 1.0 {
        return Err(Error::Geometry(format!(
            "{hh}x{ww} image is too elongated for a {residual}° rotation"
        )));
    }
    Ok((h as usize, w as usize))
}

/// Lossless counter-clockwise rotation by `quarters · 90°`.
fn quarter_turn<T: Copy>(data: &[T], h: usize, w: usize, ch: usize, quarters: i64) -> (Vec<T>, usize, usize) {
    let q = quarters.rem_euclid(4);
    let (oh, ow) = if q % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(data.len());
    for r in 0..oh {
        for c in 0..ow {
            let (sx, sy) = match q {
                0 => (c, r),
                1 => (w - 1 - r, c),
                2 => (w - 1 - c, h - 1 - r),
                _ => (r, h - 1 - c),
            };
            out.extend_from_slice(&data[(sy * w + sx) * ch..(sy * w + sx + 1) * ch]);
        }
    }
    (out, oh, ow)
}

/// Source location for output pixel `(col, row)` of an `h x w` crop of a
/// residual rotation about the center of a `src_h x src_w` raster.
#[inline]
fn residual_source(
    col: usize,
    row: usize,
    (h, w): (usize, usize),
    (src_h, src_w): (usize, usize),
    (sin, cos): (f64, f64),
) -> (f64, f64) {
    let ox = col as f64 - (w as f64 - 1.0) / 2.0;
    let oy = row as f64 - (h as f64 - 1.0) / 2.0;
    (
        (src_w as f64 - 1.0) / 2.0 + ox * cos - oy * sin,
        (src_h as f64 - 1.0) / 2.0 + ox * sin + oy * cos,
    )
}

// Corner samples of an exactly inscribed crop can land a rounding error
// outside the extent.
const EXTENT_SLACK: f64 = 1e-6;

/// Rotates counter-clockwise by `spec.theta` degrees and center-crops to
/// [`crop_dims`]; samples falling outside the source take the value `fill`.
///
/// Quarter turns are applied losslessly; only the residual is resampled,
/// bilinearly, about the image center.
pub fn rotate_center_crop_filled(img: &Image, spec: &RotationSpec, fill: f64) -> Result<Image> {
    let (h, w) = crop_dims(img.height(), img.width(), spec.theta)?;
    let (quarters, residual) = split_rotation(spec.theta);
    let ch = img.channels();
    let (turned, th, tw) = quarter_turn(img.data(), img.height(), img.width(), ch, quarters);
    let turned = Image::new(th, tw, ch, turned)?;
    if residual == 0.0 {
        return Ok(turned);
    }
    let t = residual.to_radians();
    let mut px = vec![0.0; ch];
    let mut out = Vec::with_capacity(h * w * ch);
    for row in 0..h {
        for col in 0..w {
            let (u, v) = residual_source(col, row, (h, w), (th, tw), t.sin_cos());
            let inside = u >= -EXTENT_SLACK
                && v >= -EXTENT_SLACK
                && u <= (tw - 1) as f64 + EXTENT_SLACK
                && v <= (th - 1) as f64 + EXTENT_SLACK;
            if inside {
                sample_into(&turned, u, v, &mut px);
                out.extend_from_slice(&px);
            } else {
                out.extend(std::iter::repeat(fill).take(ch));
            }
        }
    }
    Image::new(h, w, ch, out)
}

/// [`rotate_center_crop_filled`] with black fill.
pub fn rotate_center_crop(img: &Image, spec: &RotationSpec) -> Result<Image> {
    rotate_center_crop_filled(img, spec, 0.0)
}

/// Same geometry as [`rotate_center_crop`] for depth pseudo-labels, using
/// nearest-neighbor lookup so no depth is blended across edges.
pub fn rotate_center_crop_depth(depth: &DepthMap, spec: &RotationSpec) -> Result<DepthMap> {
    let (h, w) = crop_dims(depth.height(), depth.width(), spec.theta)?;
    let (quarters, residual) = split_rotation(spec.theta);
    let pairs: Vec<(f64, bool)> = depth.depth().iter().copied().zip(depth.valid().iter().copied()).collect();
    let (turned, th, tw) = quarter_turn(&pairs, depth.height(), depth.width(), 1, quarters);
    let (mut d, mut valid) = (Vec::with_capacity(h * w), Vec::with_capacity(h * w));
    if residual == 0.0 {
        for (v, ok) in turned {
            d.push(v);
            valid.push(ok);
        }
        return DepthMap::new(th, tw, d, valid);
    }
    let t = residual.to_radians();
    for row in 0..h {
        for col in 0..w {
            let (u, v) = residual_source(col, row, (h, w), (th, tw), t.sin_cos());
            let x = u.round();
            let y = v.round();
            if x >= 0.0 && y >= 0.0 && x <= (tw - 1) as f64 && y <= (th - 1) as f64 {
                let (dv, ok) = turned[y as usize * tw + x as usize];
                d.push(dv);
                valid.push(ok);
            } else {
                d.push(0.0);
                valid.push(false);
            }
        }
    }
    DepthMap::new(h, w, d, valid)
}
