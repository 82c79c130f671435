//! Underwater image formation with constant backscatter,
//! `I_c = J_c · exp(−β_c · z) + B_c`, its inversion, and depth-weighted
//! unsharp masking.
//!
//! One [`WaterModel`] is shared by every frame of a scene so that enhanced
//! frames stay photometrically consistent with each other.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::imaging::{gaussian_blur, normalize_depth, BlurConfig, DepthMap, Image};

/// Lower bound on `I − B` before taking its logarithm.
pub const RESIDUAL_FLOOR: f64 = 1e-4;

/// Share of darkest pixels averaged for the backscatter estimate.
pub const DARK_FRACTION: f64 = 0.001;

const MAX_BACKSCATTER: f64 = 0.99;

/// Minimum number of usable pixels per channel for attenuation regression.
pub const MIN_ATTENUATION_SAMPLES: usize = 100;

/// Per-scene water parameters, RGB order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterModel {
    #[serde(rename = "B")]
    pub backscatter: [f64; 3],
    /// Attenuation per metre.
    #[serde(rename = "beta_D")]
    pub beta_d: [f64; 3],
}

impl WaterModel {
    pub fn new(backscatter: [f64; 3], beta_d: [f64; 3]) -> Result<Self> {
        let m = Self { backscatter, beta_d };
        m.validate()?;
        Ok(m)
    }

    pub fn clear() -> Self {
        Self { backscatter: [0.0; 3], beta_d: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backscatter.iter().any(|b| !(0.0..1.0).contains(b)) {
            return param(format!("backscatter must lie in [0, 1), got {:?}", self.backscatter));
        }
        if self.beta_d.iter().any(|b| !b.is_finite()) {
            return param("attenuation must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpenConfig {
    /// Low-pass filter subtracted from the image to isolate detail.
    pub lowpass: BlurConfig,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self { lowpass: BlurConfig { k: 3, sigma: 2.0 } }
    }
}

fn require_rgb(img: &Image, what: &str) -> Result<()> {
    if img.channels() != 3 {
        return param(format!("{what} needs a 3-channel image, got {}", img.channels()));
    }
    Ok(())
}

/// Mean of the darkest 0.1 % of values, per channel, clamped to `[0, 0.99]`.
pub fn estimate_backscatter(img: &Image) -> Result<[f64; 3]> {
    require_rgb(img, "estimate_backscatter")?;
    let n = img.pixel_count();
    let count = (n as f64 * DARK_FRACTION).floor() as usize;
    if count == 0 {
        return param(format!("backscatter estimation needs at least 1000 pixels, got {n}"));
    }
    let mut b = [0.0; 3];
    for (c, out) in b.iter_mut().enumerate() {
        let mut vals: Vec<f64> = img.data().iter().skip(c).step_by(3).copied().collect();
        vals.select_nth_unstable_by(count - 1, f64::total_cmp);
        let mean = vals[..count].iter().sum::<f64>() / count as f64;
        *out = mean.clamp(0.0, MAX_BACKSCATTER);
    }
    Ok(b)
}

/// Target pixel count per depth bin in attenuation estimation.
const BIN_PIXELS: usize = 500;
const MAX_BINS: usize = 50;
/// Bins censored beyond this fraction on either side are left out.
const MAX_CENSORED: f64 = 0.5;

struct DepthBin {
    z: Vec<f64>,
    t: Vec<f64>,
    below: usize,
    above: usize,
}

fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    let (sz, st) = points.iter().fold((0.0, 0.0), |(a, b), (z, t)| (a + z, b + t));
    let (mz, mt) = (sz / n, st / n);
    let (mut szz, mut szt) = (0.0, 0.0);
    for (z, t) in points {
        szz += (z - mz) * (z - mz);
        szt += (z - mz) * (t - mt);
    }
    (points.len() >= 2 && szz > 1e-12 * n * (1.0 + mz * mz)).then(|| szt / szz)
}

/// Per-channel attenuation from pooled frames of one scene.
///
/// Works on `t = −ln(I_c − B_c)`, which the forward model makes
/// `−ln J_c + β_c z`. Saturated pixels (`I_c ≥ 1`) are censored at the low
/// end of `t`, and pixels whose signal is below [`RESIDUAL_FLOOR`] at the
/// high end. Pixels are grouped into equal-count depth bins, and each bin
/// contributes the mean of its sorted `t` over one quantile window shared
/// by all bins and chosen to lie clear of censoring. Those bin means
/// shift with depth exactly as `β_c z` does, so a line through them
/// recovers the slope. Bins censored past half their pixels are left out.
/// The slope is clamped to be non-negative.
pub fn estimate_attenuation(frames: &[(&Image, &DepthMap)], backscatter: &[f64; 3]) -> Result<[f64; 3]> {
    if frames.is_empty() {
        return Err(Error::Estimation("attenuation estimation needs at least one frame".into()));
    }
    let mut samples: Vec<(f64, [f64; 3])> = Vec::new();
    for (img, depth) in frames {
        require_rgb(img, "estimate_attenuation")?;
        depth.check_shape(img.height(), img.width(), "estimate_attenuation")?;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if !depth.is_valid(x, y) {
                    continue;
                }
                let t = std::array::from_fn(|c| {
                    let i = img.get(x, y, c);
                    let residual = i - backscatter[c];
                    if i >= 1.0 {
                        f64::NEG_INFINITY
                    } else if residual > RESIDUAL_FLOOR {
                        -residual.ln()
                    } else {
                        f64::INFINITY
                    }
                });
                samples.push((depth.get(x, y), t));
            }
        }
    }
    if samples.len() < MIN_ATTENUATION_SAMPLES {
        return Err(Error::Estimation(format!(
            "only {} pixels with valid depth, need {MIN_ATTENUATION_SAMPLES}",
            samples.len()
        )));
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let bins = (samples.len() / BIN_PIXELS).clamp(2, MAX_BINS);
    let chunk = samples.len().div_ceil(bins);

    let mut beta = [0.0; 3];
    for (c, out) in beta.iter_mut().enumerate() {
        let mut groups: Vec<DepthBin> = samples
            .chunks(chunk)
            .map(|part| {
                let z: Vec<f64> = part.iter().map(|s| s.0).collect();
                let mut t: Vec<f64> = part.iter().map(|s| s.1[c]).collect();
                t.sort_by(f64::total_cmp);
                let below = t.iter().take_while(|v| **v == f64::NEG_INFINITY).count();
                let above = t.iter().rev().take_while(|v| **v == f64::INFINITY).count();
                DepthBin { z, t, below, above }
            })
            .collect();
        groups.retain(|g| {
            let n = g.t.len() as f64;
            (g.below as f64) < MAX_CENSORED * n && (g.above as f64) < MAX_CENSORED * n
        });
        let q_lo = groups.iter().map(|g| g.below as f64 / g.t.len() as f64).fold(0.0, f64::max);
        let q_hi = 1.0 - groups.iter().map(|g| g.above as f64 / g.t.len() as f64).fold(0.0, f64::max);

        let points: Vec<(f64, f64)> = groups
            .iter()
            .filter_map(|g| {
                let n = g.t.len() as f64;
                let lo = (q_lo * n - 1e-9).ceil() as usize;
                let hi = ((q_hi * n + 1e-9).floor() as usize).min(g.t.len());
                (hi > lo).then(|| {
                    let k = (hi - lo) as f64;
                    (g.z[lo..hi].iter().sum::<f64>() / k, g.t[lo..hi].iter().sum::<f64>() / k)
                })
            })
            .collect();
        let slope = least_squares_slope(&points).ok_or_else(|| {
            Error::Estimation(format!("channel {c}: depth does not vary over usable pixels, slope undefined"))
        })?;
        *out = slope.max(0.0);
    }
    Ok(beta)
}

fn check_depth(img: &Image, depth: &DepthMap, what: &str) -> Result<()> {
    require_rgb(img, what)?;
    depth.check_shape(img.height(), img.width(), what)
}

/// `J_c = (I_c − B_c) · exp(β_c z)`, clamped to `[0, 1]`; holes pass through.
pub fn restore(img: &Image, depth: &DepthMap, model: &WaterModel) -> Result<Image> {
    check_depth(img, depth, "restore")?;
    model.validate()?;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !depth.is_valid(x, y) {
                continue;
            }
            let z = depth.get(x, y);
            for c in 0..3 {
                let j = (img.get(x, y, c) - model.backscatter[c]) * (model.beta_d[c] * z).exp();
                out.set(x, y, c, j.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Forward model `I_c = J_c · exp(−β_c z) + B_c`, clamped to `[0, 1]`;
/// holes pass through.
pub fn degrade(clean: &Image, depth: &DepthMap, model: &WaterModel) -> Result<Image> {
    check_depth(clean, depth, "degrade")?;
    model.validate()?;
    let mut out = clean.clone();
    for y in 0..clean.height() {
        for x in 0..clean.width() {
            if !depth.is_valid(x, y) {
                continue;
            }
            let z = depth.get(x, y);
            for c in 0..3 {
                let i = clean.get(x, y, c) * (-model.beta_d[c] * z).exp() + model.backscatter[c];
                out.set(x, y, c, i.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// `I + (I − lowpass(I)) · d'` with `d'` the min-max normalized depth, so
/// distant regions get the strongest sharpening. Clamped to `[0, 1]`.
pub fn depth_weighted_sharpen(img: &Image, depth: &DepthMap, cfg: &SharpenConfig) -> Result<Image> {
    depth.check_shape(img.height(), img.width(), "depth_weighted_sharpen")?;
    let weight = normalize_depth(depth)?;
    let low = gaussian_blur(img, &cfg.lowpass)?;
    let ch = img.channels();
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let wgt = weight.get(x, y);
            for c in 0..ch {
                let i = img.get(x, y, c);
                out.set(x, y, c, ((i - low.get(x, y, c)) * wgt + i).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Restoration followed by depth-weighted sharpening.
pub fn enhance(img: &Image, depth: &DepthMap, model: &WaterModel, cfg: &SharpenConfig) -> Result<Image> {
    let restored = restore(img, depth, model)?;
    depth_weighted_sharpen(&restored, depth, cfg)
}

/// Which frames of a scene feed the shared model estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampling {
    /// Use every n-th frame.
    pub stride: usize,
}

impl Default for SceneSampling {
    fn default() -> Self {
        Self { stride: 20 }
    }
}

impl SceneSampling {
    pub fn select<T>(&self, frames: &[T]) -> Vec<usize> {
        (0..frames.len()).step_by(self.stride.max(1)).collect()
    }
}

/// Estimates one [`WaterModel`] for a whole scene: backscatter is the mean
/// of per-frame dark-pixel estimates, attenuation a single regression over
/// all sampled frames.
pub fn estimate_scene_model(frames: &[(&Image, &DepthMap)], sampling: &SceneSampling) -> Result<WaterModel> {
    let picked: Vec<(&Image, &DepthMap)> = sampling.select(frames).into_iter().map(|i| frames[i]).collect();
    if picked.is_empty() {
        return Err(Error::Estimation("scene has no frames".into()));
    }
    let mut backscatter = [0.0; 3];
    for (img, _) in &picked {
        let b = estimate_backscatter(img)?;
        for c in 0..3 {
            backscatter[c] += b[c] / picked.len() as f64;
        }
    }
    let beta_d = estimate_attenuation(&picked, &backscatter)?;
    WaterModel::new(backscatter, beta_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured_with_black(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |x, y, _| {
            if (x + y * w) % 250 == 0 {
                0.0
            } else {
                rng.gen_range(0.2..0.9)
            }
        })
    }

    fn depth_ramp(h: usize, w: usize, near: f64, far: f64) -> DepthMap {
        DepthMap::from_fn(h, w, |x, y| near + (far - near) * (x + y * w) as f64 / (h * w - 1) as f64)
    }

    #[test]
    fn backscatter_examples() {
        let b = estimate_backscatter(&Image::filled(40, 40, 3, 0.37)).unwrap();
        assert!(b.iter().all(|v| (v - 0.37).abs() < 1e-12));

        // 2000 pixels, exactly 2 of them black in every channel.
        let mut img = Image::filled(40, 50, 3, 0.8);
        for c in 0..3 {
            img.set(3, 7, c, 0.0);
            img.set(30, 17, c, 0.0);
        }
        assert_eq!(estimate_backscatter(&img).unwrap(), [0.0; 3]);

        assert!(matches!(estimate_backscatter(&Image::filled(10, 10, 3, 0.5)), Err(Error::Parameter(_))));
    }

    #[test]
    fn backscatter_recovered_from_simulation() {
        let clean = textured_with_black(50, 60, 1);
        let depth = depth_ramp(50, 60, 0.5, 8.0);
        let model = WaterModel::new([0.12, 0.21, 0.27], [0.45, 0.12, 0.08]).unwrap();
        let b = estimate_backscatter(&degrade(&clean, &depth, &model).unwrap()).unwrap();
        for c in 0..3 {
            assert!((b[c] - model.backscatter[c]).abs() < 0.02);
        }
    }

    #[test]
    fn attenuation_flat_field_is_exact() {
        let model = WaterModel::new([0.1, 0.15, 0.2], [0.4, 0.15, 0.07]).unwrap();
        let clean = Image::filled(40, 40, 3, 0.5);
        let depths = [depth_ramp(40, 40, 0.5, 4.0), depth_ramp(40, 40, 1.0, 6.0)];
        let imgs: Vec<Image> = depths.iter().map(|d| degrade(&clean, d, &model).unwrap()).collect();
        let frames: Vec<_> = imgs.iter().zip(&depths).collect();
        let beta = estimate_attenuation(&frames, &model.backscatter).unwrap();
        for c in 0..3 {
            assert!((beta[c] - model.beta_d[c]).abs() <= 0.01 * model.beta_d[c]);
        }
    }

    #[test]
    fn attenuation_unbiased_when_near_pixels_saturate() {
        // Bright albedo plus strong backscatter clips the near, bright pixels.
        let model = WaterModel::new([0.1, 0.2, 0.3], [0.4, 0.15, 0.07]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let depth = depth_ramp(120, 160, 0.5, 7.0);
        let imgs: Vec<Image> = (0..3)
            .map(|_| degrade(&Image::from_fn(120, 160, 3, |_, _, _| rng.gen_range(0.2..0.9)), &depth, &model).unwrap())
            .collect();
        let saturated = imgs[0].data().chunks(3).filter(|p| p[2] >= 1.0).count();
        assert!(saturated > 1000, "fixture must saturate the blue channel, got {saturated}");
        let frames: Vec<_> = imgs.iter().map(|img| (img, &depth)).collect();
        let beta = estimate_attenuation(&frames, &model.backscatter).unwrap();
        for c in 0..3 {
            assert!((beta[c] - model.beta_d[c]).abs() <= 0.05 * model.beta_d[c], "channel {c}: {}", beta[c]);
        }
    }

    #[test]
    fn attenuation_needs_depth_variation() {
        let img = Image::filled(20, 20, 3, 0.5);
        let holes = DepthMap::from_raw(20, 20, vec![0.0; 400]).unwrap();
        assert!(matches!(estimate_attenuation(&[(&img, &holes)], &[0.1; 3]), Err(Error::Estimation(_))));
        let constant = DepthMap::filled(20, 20, 2.0);
        assert!(matches!(estimate_attenuation(&[(&img, &constant)], &[0.1; 3]), Err(Error::Estimation(_))));
        assert!(matches!(estimate_attenuation(&[], &[0.1; 3]), Err(Error::Estimation(_))));
    }

    #[test]
    fn restore_examples() {
        let img = textured_with_black(8, 8, 2);
        let depth = depth_ramp(8, 8, 1.0, 3.0);
        assert_eq!(restore(&img, &depth, &WaterModel::clear()).unwrap(), img);

        let backscatter_only = WaterModel::new([0.2; 3], [0.0; 3]).unwrap();
        let out = restore(&Image::filled(4, 4, 3, 0.5), &DepthMap::filled(4, 4, 2.0), &backscatter_only).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn restore_passes_holes_through() {
        let img = Image::filled(2, 2, 3, 0.6);
        let depth = DepthMap::from_raw(2, 2, vec![1.0, f64::NAN, 1.0, 1.0]).unwrap();
        let model = WaterModel::new([0.1; 3], [0.5; 3]).unwrap();
        let out = restore(&img, &depth, &model).unwrap();
        assert_eq!(out.get(1, 0, 0), 0.6);
        assert_ne!(out.get(0, 0, 0), 0.6);
    }

    #[test]
    fn degrade_examples() {
        let img = textured_with_black(8, 8, 3);
        let depth = depth_ramp(8, 8, 1.0, 3.0);
        assert_eq!(degrade(&img, &depth, &WaterModel::clear()).unwrap(), img);

        let model = WaterModel::new([0.1, 0.2, 0.05], [0.5, 0.25, 0.1]).unwrap();
        for c in 0..3 {
            let z = 1.0 / model.beta_d[c];
            let out = degrade(&Image::filled(1, 1, 3, 1.0), &DepthMap::filled(1, 1, z), &model).unwrap();
            assert!((out.get(0, 0, c) - ((-1.0f64).exp() + model.backscatter[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn degrade_restore_roundtrip() {
        let clean = textured_with_black(32, 32, 4);
        let depth = depth_ramp(32, 32, 0.5, 6.0);
        let model = WaterModel::new([0.15, 0.2, 0.25], [0.35, 0.12, 0.06]).unwrap();
        let back = restore(&degrade(&clean, &depth, &model).unwrap(), &depth, &model).unwrap();
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let raw = clean.get(x, y, c) * (-model.beta_d[c] * depth.get(x, y)).exp() + model.backscatter[c];
                    if (0.0..=1.0).contains(&raw) {
                        checked += 1;
                        assert!((clean.get(x, y, c) - back.get(x, y, c)).abs() < 1e-6);
                    }
                }
            }
        }
        assert!(checked > 2000);
    }

    #[test]
    fn sharpen_is_identity_without_depth_range_or_detail() {
        let img = textured_with_black(12, 12, 5);
        let cfg = SharpenConfig::default();
        assert_eq!(depth_weighted_sharpen(&img, &DepthMap::filled(12, 12, 3.0), &cfg).unwrap(), img);

        let flat = Image::filled(12, 12, 3, 0.4);
        let out = depth_weighted_sharpen(&flat, &depth_ramp(12, 12, 1.0, 9.0), &cfg).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn sharpen_step_edge_matches_unsharp_oracle() {
        let (h, w) = (9, 24);
        let img = Image::from_fn(h, w, 3, |x, _, _| if x < 12 { 0.3 } else { 0.7 });
        // d' = 1 everywhere but one far-away corner pixel.
        let depth = DepthMap::from_fn(h, w, |x, y| if x == 0 && y == 0 { 1.0 } else { 2.0 });
        let cfg = SharpenConfig::default();
        let out = depth_weighted_sharpen(&img, &depth, &cfg).unwrap();

        // 1-D oracle: y-invariant image, so the 2-D blur is the 1-D kernel along x.
        let (k, sigma) = (cfg.lowpass.k as isize, cfg.lowpass.sigma);
        let wts: Vec<f64> = (-k..=k).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = wts.iter().sum();
        let row = |x: isize| {
            let x = if x < 0 { -x } else if x >= w as isize { 2 * (w as isize - 1) - x } else { x };
            if x < 12 { 0.3 } else { 0.7 }
        };
        for x in 0..w {
            let low: f64 = wts.iter().enumerate().map(|(j, wt)| wt * row(x as isize + j as isize - k)).sum::<f64>() / total;
            let i = row(x as isize);
            let expect = i + (i - low);
            assert!((out.get(x, 4, 1) - expect).abs() < 1e-12, "x={x}");
        }
        assert!(out.get(11, 4, 0) < 0.3 && out.get(12, 4, 0) > 0.7, "overshoot on both sides");
    }

    #[test]
    fn sharpen_roughly_preserves_mean() {
        let img = Image::from_fn(40, 40, 3, |x, y, c| 0.5 + 0.2 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.5).cos()));
        let depth = depth_ramp(40, 40, 1.0, 5.0);
        let out = depth_weighted_sharpen(&img, &depth, &SharpenConfig::default()).unwrap();
        assert!((img.mean() - out.mean()).abs() < 1e-3);
    }

    #[test]
    fn enhance_identity_without_water_or_depth_range() {
        let img = textured_with_black(10, 10, 6);
        let out = enhance(&img, &DepthMap::filled(10, 10, 2.0), &WaterModel::clear(), &SharpenConfig::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn model_validation() {
        assert!(WaterModel::new([1.0, 0.0, 0.0], [0.0; 3]).is_err());
        assert!(WaterModel::new([0.1; 3], [f64::NAN, 0.0, 0.0]).is_err());
        let json = serde_json::to_string(&WaterModel::new([0.1, 0.2, 0.3], [0.4, 0.5, 0.6]).unwrap()).unwrap();
        assert_eq!(json, r#"{"B":[0.1,0.2,0.3],"beta_D":[0.4,0.5,0.6]}"#);
    }

    proptest! {
        #[test]
        fn restore_is_monotone(base in prop::collection::vec(0.0f64..1.0, 48), bump in prop::collection::vec(0.0f64..0.3, 48)) {
            let a = Image::new(4, 4, 3, base.clone()).unwrap();
            let b = Image::new(4, 4, 3, base.iter().zip(&bump).map(|(x, d)| (x + d).min(1.0)).collect()).unwrap();
            let depth = depth_ramp(4, 4, 0.5, 5.0);
            let model = WaterModel::new([0.1, 0.15, 0.2], [0.3, 0.1, 0.05]).unwrap();
            let ra = restore(&a, &depth, &model).unwrap();
            let rb = restore(&b, &depth, &model).unwrap();
            for (x, y) in ra.data().iter().zip(rb.data()) {
                prop_assert!(y >= x);
            }
        }
    }
}
