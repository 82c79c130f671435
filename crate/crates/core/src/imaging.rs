//! Raster primitives shared by the rest of the crate.
//!
//! Images are stored row-major with interleaved channels. All arithmetic is
//! `f64`; file I/O converts at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Floating-point raster with 1 or 3 interleaved channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return param(format!("image must be non-empty, got {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return param(format!("image must have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return param(format!(
                "image buffer length {} does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return param("image contains non-finite values");
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds an image from `f(x, y, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            param(format!(
                "{what}: shape mismatch {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation over all samples.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }
}

/// Height/width pair used for shape checks between raster types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

/// Per-pixel depth with an explicit validity channel.
///
/// Invalid pixels are excluded from every reduction. Loaders mark NaN and
/// non-positive samples invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return param(format!("depth map must be non-empty, got {height}x{width}"));
        }
        if depth.len() != height * width || valid.len() != height * width {
            return param("depth map buffer length does not match its shape");
        }
        let mut depth = depth;
        for (d, &ok) in depth.iter_mut().zip(&valid) {
            if ok && !d.is_finite() {
                return param("valid depth pixel is not finite");
            }
            if !ok && !d.is_finite() {
                *d = 0.0;
            }
        }
        Ok(Self { height, width, depth, valid })
    }

    /// Wraps raw samples, treating NaN, infinities and values `<= 0` as holes.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>) -> Result<Self> {
        let valid: Vec<bool> = raw.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depth = raw.iter().zip(&valid).map(|(&d, &ok)| if ok { d } else { 0.0 }).collect();
        Self::new(height, width, depth, valid)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self {
            height,
            width,
            depth: vec![value; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut raw = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                raw.push(f(x, y));
            }
        }
        Self::from_raw(height, width, raw).expect("shape is consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.depth.iter().zip(&self.valid).filter(|(_, ok)| **ok).map(|(d, _)| *d)
    }

    /// Same validity, every valid depth multiplied by `s`.
    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            depth: self.depth.iter().map(|d| d * s).collect(),
            ..self.clone()
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape { height: self.height, width: self.width }
    }

    pub(crate) fn check_shape(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height == height && self.width == width {
            Ok(())
        } else {
            param(format!(
                "{what}: depth {}x{} does not match {height}x{width}",
                self.height, self.width
            ))
        }
    }
}

/// Binary per-pixel map; `true` means the pixel participates in the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != height * width || height == 0 || width == 0 {
            return param("mask buffer length does not match its shape");
        }
        Ok(Self { height, width, keep })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, keep: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.keep[y * self.width + x]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn keep_rate(&self) -> f64 {
        self.kept() as f64 / self.keep.len() as f64
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.height != other.height || self.width != other.width {
            return param("mask shape mismatch");
        }
        Ok(Mask {
            keep: self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect(),
            ..self.clone()
        })
    }
}

/// Continuous sampling coordinates, one `(u, v)` per output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Pixels for which no coordinate could be formed (hole or behind camera).
    pub valid: Vec<bool>,
}

impl CoordField {
    /// The integer grid: `u = x`, `v = y`.
    pub fn identity(height: usize, width: usize) -> Self {
        let n = height * width;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                u.push(x as f64);
                v.push(y as f64);
            }
        }
        Self { height, width, u, v, valid: vec![true; n] }
    }
}

/// Gaussian kernel half-window and standard deviation, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurConfig {
    pub k: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { k: 2, sigma: 1.5 }
    }
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return param("blur half-window k must be >= 1");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return param(format!("blur sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    /// 1-D kernel of length `2k+1`, normalized to unit sum.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let k = self.k as isize;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let mut w: Vec<f64> = (-k..=k).map(|i| (-((i * i) as f64) / two_s2).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Convolves with a normalized 2-D Gaussian under reflection padding.
///
/// The 2-D kernel is the outer product of the normalized 1-D kernel, which
/// equals the directly normalized 2-D kernel.
pub fn gaussian_blur(img: &Image, cfg: &BlurConfig) -> Result<Image> {
    cfg.validate()?;
    let kernel = cfg.kernel_1d();
    let k = cfg.k as isize;
    let (h, w, ch) = (img.height, img.width, img.channels);

    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, wt) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - k, w);
                    acc += wt * img.data[(y * w + sx) * ch + c];
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, wt) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - k, h);
                    acc += wt * tmp[(sy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    Ok(Image { height: h, width: w, channels: ch, data: out })
}

/// Forward differences `I(x+1) - I(x)` and `I(y+1) - I(y)`.
///
/// The last column of `gx` and last row of `gy` are zero.
pub fn image_gradients(img: &Image) -> Result<(Image, Image)> {
    let (h, w, ch) = (img.height, img.width, img.channels);
    if h < 2 || w < 2 {
        return param(format!("gradients need at least 2x2 pixels, got {h}x{w}"));
    }
    let mut gx = Image::filled(h, w, ch, 0.0);
    let mut gy = Image::filled(h, w, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                if x + 1 < w {
                    gx.set(x, y, c, img.get(x + 1, y, c) - img.get(x, y, c));
                }
                if y + 1 < h {
                    gy.set(x, y, c, img.get(x, y + 1, c) - img.get(x, y, c));
                }
            }
        }
    }
    Ok((gx, gy))
}

/// Nearest-rank percentile: the element at sorted index `ceil(q/100 * n) - 1`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return param("percentile of an empty list");
    }
    if !(0.0..=100.0).contains(&q) {
        return param(format!("percentile rank {q} outside [0, 100]"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return param("percentile input contains non-finite values");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // q*n/100 keeps integer ranks exact (0.95*100 is not).
    let rank = (q * n as f64 / 100.0).ceil() as isize - 1;
    Ok(sorted[rank.clamp(0, n as isize - 1) as usize])
}

/// Bilinear interpolation at continuous coordinates.
///
/// Coordinates outside `[0, W-1] x [0, H-1]` are clamped to the border and
/// flagged invalid in the returned mask, as are pixels the field itself marks
/// invalid.
pub fn bilinear_sample(img: &Image, coords: &CoordField) -> Result<(Image, Mask)> {
    let n = coords.height * coords.width;
    if coords.u.len() != n || coords.v.len() != n || coords.valid.len() != n {
        return param("coordinate field buffers do not match its shape");
    }
    let ch = img.channels;
    let mut out = Vec::with_capacity(n * ch);
    let mut keep = Vec::with_capacity(n);
    let mut px = vec![0.0; ch];
    for i in 0..n {
        let (u, v) = (coords.u[i], coords.v[i]);
        if !u.is_finite() || !v.is_finite() {
            return param("coordinate field contains non-finite values");
        }
        let inside = sample_into(img, u, v, &mut px);
        out.extend_from_slice(&px);
        keep.push(inside && coords.valid[i]);
    }
    Ok((
        Image { height: coords.height, width: coords.width, channels: ch, data: out },
        Mask { height: coords.height, width: coords.width, keep },
    ))
}

/// Samples one location into `out`; returns whether it lay inside the extent.
pub(crate) fn sample_into(img: &Image, u: f64, v: f64, out: &mut [f64]) -> bool {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let inside = (0.0..=max_x).contains(&u) && (0.0..=max_y).contains(&v);
    let uc = u.clamp(0.0, max_x);
    let vc = v.clamp(0.0, max_y);
    let x0 = uc.floor() as usize;
    let y0 = vc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = uc - x0 as f64;
    let fy = vc - y0 as f64;
    for c in 0..ch {
        let v00 = img.data[(y0 * w + x0) * ch + c];
        let v10 = img.data[(y0 * w + x1) * ch + c];
        let v01 = img.data[(y1 * w + x0) * ch + c];
        let v11 = img.data[(y1 * w + x1) * ch + c];
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        out[c] = top + (bottom - top) * fy;
    }
    inside
}

/// Bilinear value plus its partial derivatives along `u` and `v`.
///
/// Coordinates are assumed inside the extent.
pub(crate) fn sample_with_grad(
    img: &Image,
    u: f64,
    v: f64,
    val: &mut [f64],
    du: &mut [f64],
    dv: &mut [f64],
) {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let x0 = uc.floor() as usize;
    let y0 = vc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = uc - x0 as f64;
    let fy = vc - y0 as f64;
    for c in 0..ch {
        let v00 = img.data[(y0 * w + x0) * ch + c];
        let v10 = img.data[(y0 * w + x1) * ch + c];
        let v01 = img.data[(y1 * w + x0) * ch + c];
        let v11 = img.data[(y1 * w + x1) * ch + c];
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        val[c] = top + (bottom - top) * fy;
        du[c] = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
        dv[c] = bottom - top;
    }
}

/// Min-max normalization of valid depths to `[0, 1]`; holes map to 0.
///
/// A constant map normalizes to all zeros. The result keeps the input's
/// validity flags and may contain valid zeros.
pub fn normalize_depth(d: &DepthMap) -> Result<DepthMap> {
    let (lo, hi) = d
        .valid_values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return param("cannot normalize a depth map without valid pixels");
    }
    let range = hi - lo;
    let depth = d
        .depth
        .iter()
        .zip(&d.valid)
        .map(|(&v, &ok)| if ok && range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect();
    Ok(DepthMap { depth, ..d.clone() })
}
