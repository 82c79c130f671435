//! Pixel masks: teacher-guided anomaly masking with an EMA threshold,
//! static-pixel auto-masking, and the 3-D depth-consistency mask.

use serde::{Deserialize, Serialize};

use crate::camera::{reproject, Intrinsics, Pose};
use crate::error::{param, Result};
use crate::imaging::{gaussian_blur, BlurConfig, DepthMap, Image};
use crate::losses::{min_reprojection_loss, photometric_error, LossConfig, LossMap};

pub use crate::imaging::Mask;

/// Running threshold for anomaly masking.
///
/// Updates must be applied by a single writer in a fixed order; replaying
/// the same sequence reproduces every threshold bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgamState {
    pub threshold: f64,
    pub beta: f64,
    /// Percentage of highest-loss pixels each image's statistic targets.
    pub epsilon: f64,
    pub initialized: bool,
}

impl Default for TgamState {
    fn default() -> Self {
        Self::new(0.98, 5.0).expect("defaults are valid")
    }
}

impl TgamState {
    pub fn new(beta: f64, epsilon: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return param(format!("momentum must lie in (0, 1), got {beta}"));
        }
        if !(epsilon > 0.0 && epsilon < 100.0) {
            return param(format!("epsilon must lie in (0, 100), got {epsilon}"));
        }
        Ok(Self { threshold: 0.0, beta, epsilon, initialized: false })
    }

    /// Folds one image's loss statistic into the running threshold and
    /// returns the new threshold. The state is untouched on error.
    pub fn update(&mut self, loss_map: &LossMap) -> Result<f64> {
        let values = loss_map.valid_values();
        let t = top_fraction_boundary(&values, self.epsilon)?;
        self.threshold = if self.initialized {
            self.beta * self.threshold + (1.0 - self.beta) * t
        } else {
            t
        };
        self.initialized = true;
        Ok(self.threshold)
    }
}

/// Per-image statistic: the smallest of the `ceil(epsilon/100 · n)` largest
/// values, so that thresholding with strict `<` drops exactly that many
/// pixels when values are distinct.
///
/// This is the nearest-rank `(100 − epsilon)` percentile taken from the
/// upper side; it differs from [`crate::imaging::percentile`] by at most one rank.
pub fn top_fraction_boundary(values: &[f64], epsilon: f64) -> Result<f64> {
    if values.is_empty() {
        return param("anomaly threshold needs at least one valid loss value");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return param("loss map contains non-finite values");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let dropped = ((epsilon * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    Ok(sorted[n - dropped])
}

/// Functional form of [`TgamState::update`].
pub fn tgam_update(state: &TgamState, loss_map: &LossMap) -> Result<(TgamState, f64)> {
    let mut next = *state;
    let t = next.update(loss_map)?;
    Ok((next, t))
}

/// Keeps valid pixels whose loss is strictly below `threshold`.
pub fn tgam_mask(loss_map: &LossMap, threshold: f64) -> Result<Mask> {
    if !threshold.is_finite() {
        return param("anomaly threshold must be finite");
    }
    let keep = loss_map.value.iter().zip(&loss_map.valid).map(|(v, ok)| *ok && *v < threshold).collect();
    Mask::new(loss_map.height, loss_map.width, keep)
}

/// Teacher loss used for anomaly masking: minimum photometric error between
/// the Gaussian-blurred target and each blurred warped source.
pub fn teacher_loss_map(
    target: &Image,
    warps: &[(Image, Mask)],
    blur: &BlurConfig,
    cfg: &LossConfig,
) -> Result<LossMap> {
    let target = gaussian_blur(target, blur)?;
    let blurred = warps
        .iter()
        .map(|(w, m)| Ok((gaussian_blur(w, blur)?, m.clone())))
        .collect::<Result<Vec<_>>>()?;
    min_reprojection_loss(&target, &blurred, cfg)
}

/// Keeps pixels where the best warped source beats the best unwarped source.
///
/// Pixels no warp covers are dropped.
pub fn auto_mask(
    target: &Image,
    sources: &[Image],
    warps: &[(Image, Mask)],
    cfg: &LossConfig,
) -> Result<Mask> {
    if sources.len() != warps.len() {
        return param(format!(
            "auto_mask: {} sources but {} warps",
            sources.len(),
            warps.len()
        ));
    }
    if sources.is_empty() {
        return param("auto_mask needs at least one source");
    }
    let warped = min_reprojection_loss(target, warps, cfg)?;
    let mut identity = vec![f64::INFINITY; target.pixel_count()];
    for src in sources {
        let pe = photometric_error(target, src, cfg)?;
        for (best, v) in identity.iter_mut().zip(&pe.value) {
            *best = best.min(*v);
        }
    }
    let keep = warped
        .value
        .iter()
        .zip(&warped.valid)
        .zip(&identity)
        .map(|((w, ok), id)| *ok && w < id)
        .collect();
    Mask::new(target.height(), target.width(), keep)
}

/// One source view for the consistency check: its depth and the
/// target-to-source pose.
#[derive(Debug, Clone)]
pub struct SourceDepth<'a> {
    pub depth: &'a DepthMap,
    pub pose_ts: &'a Pose,
}

/// Bilinear depth lookup that ignores invalid neighbors, renormalizing the
/// remaining weights. `None` when no neighbor with nonzero weight is valid.
fn sample_valid_depth(d: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (d.width(), d.height());
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (dx, dy, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if wt == 0.0 {
            continue;
        }
        let (x, y) = ((x0 + dx).min(w - 1), (y0 + dy).min(h - 1));
        if d.is_valid(x, y) {
            acc += wt * d.get(x, y);
            wsum += wt;
        }
    }
    (wsum > 0.0).then(|| acc / wsum)
}

/// Per-pixel L1 distance between the target's 3-D point and the matching
/// source point brought back into the target frame; the minimum over sources.
///
/// `None` marks pixels with no usable correspondence.
pub fn consistency_distances(
    depth_t: &DepthMap,
    sources: &[SourceDepth<'_>],
    k: &Intrinsics,
) -> Result<Vec<Option<f64>>> {
    if sources.is_empty() {
        return param("consistency check needs at least one source depth");
    }
    let (h, w) = (depth_t.height(), depth_t.width());
    let mut best: Vec<Option<f64>> = vec![None; h * w];
    for src in sources {
        src.depth.check_shape(h, w, "consistency_mask")?;
        let coords = reproject(depth_t, src.pose_ts, k)?;
        let back = src.pose_ts.inverse();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !coords.valid[i] {
                    continue;
                }
                let (us, vs) = (coords.u[i], coords.v[i]);
                let Some(ds) = sample_valid_depth(src.depth, us, vs) else { continue };
                if ds <= 0.0 {
                    continue;
                }
                let p_s = back.transform(&(k.unproject(us, vs) * ds));
                let p_t = k.unproject(x as f64, y as f64) * depth_t.get(x, y);
                let dist = (p_s - p_t).abs().sum();
                best[i] = Some(best[i].map_or(dist, |b: f64| b.min(dist)));
            }
        }
    }
    Ok(best)
}

/// Keeps target pixels whose depth agrees in 3-D with at least one source
/// depth to within `tau` (L1); out-of-view or unsampleable pixels are dropped.
pub fn consistency_mask_multi(
    depth_t: &DepthMap,
    sources: &[SourceDepth<'_>],
    k: &Intrinsics,
    tau: f64,
) -> Result<Mask> {
    if !(tau > 0.0) {
        return param(format!("tau must be positive, got {tau}"));
    }
    let dist = consistency_distances(depth_t, sources, k)?;
    let keep = dist.iter().map(|d| d.is_some_and(|d| d < tau)).collect();
    Mask::new(depth_t.height(), depth_t.width(), keep)
}

/// Single-source [`consistency_mask_multi`].
pub fn consistency_mask(
    depth_t: &DepthMap,
    depth_s: &DepthMap,
    pose_ts: &Pose,
    k: &Intrinsics,
    tau: f64,
) -> Result<Mask> {
    consistency_mask_multi(depth_t, &[SourceDepth { depth: depth_s, pose_ts }], k, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::synthesize_view;
    use crate::synth::PlaneScene;
    use crate::Error;
    use nalgebra::Vector3;

    fn loss_map(values: Vec<f64>, w: usize) -> LossMap {
        let h = values.len() / w;
        let n = values.len();
        LossMap::new(h, w, values, vec![true; n]).unwrap()
    }

    #[test]
    fn first_update_initializes_threshold() {
        let mut s = TgamState::default();
        let t = s.update(&loss_map(vec![0.3; 20], 5)).unwrap();
        assert_eq!(t, 0.3);
        assert!(s.initialized);
    }

    #[test]
    fn ema_step() {
        let mut s = TgamState { threshold: 1.0, initialized: true, ..TgamState::default() };
        let t = s.update(&loss_map(vec![2.0; 20], 5)).unwrap();
        assert!((t - 1.02).abs() < 1e-12);
    }

    #[test]
    fn empty_loss_map_leaves_state_untouched() {
        let mut s = TgamState { threshold: 0.7, initialized: true, ..TgamState::default() };
        let empty = LossMap::new(2, 2, vec![1.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(s.update(&empty), Err(Error::Parameter(_))));
        assert_eq!(s.threshold, 0.7);
    }

    #[test]
    fn state_rejects_bad_hyperparameters() {
        assert!(TgamState::new(1.0, 5.0).is_err());
        assert!(TgamState::new(0.5, 0.0).is_err());
        assert!(TgamState::new(0.5, 100.0).is_err());
    }

    #[test]
    fn mask_drops_top_fraction_exactly() {
        // 200 distinct values: 10 of them (5%) must go.
        let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 * 0.01).collect();
        let lm = loss_map(values.clone(), 20);
        let t = top_fraction_boundary(&values, 5.0).unwrap();
        let m = tgam_mask(&lm, t).unwrap();
        assert_eq!(200 - m.kept(), 10);
        for (v, k) in values.iter().zip(m.keep()) {
            assert_eq!(*k, *v < 1.90);
        }
    }

    #[test]
    fn mask_is_strict_at_threshold() {
        let lm = loss_map(vec![0.1, 0.5, 0.5, 0.9], 2);
        let m = tgam_mask(&lm, 0.5).unwrap();
        assert_eq!(m.keep(), &[true, false, false, false]);
        let all = tgam_mask(&lm, 10.0).unwrap();
        assert_eq!(all.kept(), 4);
        assert!(tgam_mask(&lm, f64::NAN).is_err());
    }

    #[test]
    fn boundary_is_within_one_rank_of_percentile() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = crate::imaging::percentile(&values, 95.0).unwrap();
        let b = top_fraction_boundary(&values, 5.0).unwrap();
        assert_eq!((p, b), (95.0, 96.0));
    }

    #[test]
    fn auto_mask_drops_static_frames() {
        let cfg = LossConfig::default();
        let t = Image::from_fn(12, 12, 3, |x, y, c| ((x * 7 + y * 3 + c) % 5) as f64 / 5.0);
        let noisy = t.map(|v| (v + 0.05).min(1.0));
        let full = Mask::full(12, 12, true);
        let m = auto_mask(&t, &[t.clone()], &[(noisy, full.clone())], &cfg).unwrap();
        assert_eq!(m.kept(), 0);

        // Tie: identical warp and source, strict comparison fails everywhere.
        let m = auto_mask(&t, &[t.clone()], &[(t.clone(), full.clone())], &cfg).unwrap();
        assert_eq!(m.kept(), 0);

        assert!(matches!(auto_mask(&t, &[t.clone(), t.clone()], &[(t.clone(), full)], &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn auto_mask_keeps_moving_scene() {
        let scene = PlaneScene::fronto_parallel(96, 96, 2.0);
        let pose = Pose::from_translation(Vector3::new(-0.1, 0.0, 0.0));
        let target = scene.render(&Pose::identity());
        let source = scene.render(&pose);
        let depth = scene.depth(&Pose::identity());
        let warp = synthesize_view(&source, &depth, &pose, &scene.k).unwrap();
        let valid = warp.1.clone();
        let m = auto_mask(&target, &[source], &[warp], &LossConfig::default()).unwrap();
        let in_view = valid.kept();
        let kept = m.keep().iter().zip(valid.keep()).filter(|(k, v)| **k && **v).count();
        assert_eq!(m.kept(), kept);
        assert!(kept as f64 / in_view as f64 > 0.95, "kept {kept} of {in_view}");
    }

    #[test]
    fn consistency_keeps_static_scene_and_drops_bias() {
        let scene = PlaneScene::slanted(48, 64, 1.0);
        let pose = Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.02, Vector3::new(-0.05, 0.01, 0.02));
        let dt = scene.depth(&Pose::identity());
        let ds = scene.depth(&pose);
        let coords = reproject(&dt, &pose, &scene.k).unwrap();
        let in_view: Vec<bool> = (0..coords.u.len())
            .map(|i| coords.valid[i] && coords.u[i] >= 0.0 && coords.v[i] >= 0.0 && coords.u[i] <= 63.0 && coords.v[i] <= 47.0)
            .collect();
        let m = consistency_mask(&dt, &ds, &pose, &scene.k, 0.03).unwrap();
        assert_eq!(m.keep(), &in_view[..]);

        let biased = DepthMap::from_raw(48, 64, ds.depth().iter().map(|d| d + 0.06).collect()).unwrap();
        let m = consistency_mask(&dt, &biased, &pose, &scene.k, 0.03).unwrap();
        assert!(m.keep_rate() < 0.01);
    }

    #[test]
    fn consistency_is_symmetric_under_role_swap() {
        let scene = PlaneScene::fronto_parallel(32, 40, 1.5);
        let pose = Pose::from_translation(Vector3::new(-0.04, 0.02, 0.0));
        let dt = scene.depth(&Pose::identity());
        let ds = scene.depth(&pose);
        let fwd = consistency_mask(&dt, &ds, &pose, &scene.k, 0.03).unwrap();
        let bwd = consistency_mask(&ds, &dt, &pose.inverse(), &scene.k, 0.03).unwrap();
        for (mask, depth, p) in [(&fwd, &dt, pose), (&bwd, &ds, pose.inverse())] {
            let c = reproject(depth, &p, &scene.k).unwrap();
            for i in 0..c.u.len() {
                let inside = c.u[i] >= 0.0 && c.u[i] <= 39.0 && c.v[i] >= 0.0 && c.v[i] <= 31.0;
                assert_eq!(mask.keep()[i], inside);
            }
        }
    }

    #[test]
    fn consistency_skips_holes() {
        let k = Intrinsics::new(20.0, 20.0, 4.0, 4.0).unwrap();
        let dt = DepthMap::filled(8, 8, 1.0);
        let mut raw = vec![1.0; 64];
        raw[3 * 8 + 3] = f64::NAN;
        raw[3 * 8 + 4] = f64::NAN;
        raw[4 * 8 + 3] = f64::NAN;
        raw[4 * 8 + 4] = f64::NAN;
        let ds = DepthMap::from_raw(8, 8, raw).unwrap();
        // Half-pixel shift: pixel (3,3) samples between (3..4, 3) only.
        let pose = Pose::from_translation(Vector3::new(0.025, 0.0, 0.0));
        let m = consistency_mask(&dt, &ds, &pose, &k, 0.03).unwrap();
        assert!(!m.get(3, 3) && !m.get(3, 4));
        assert!(m.get(0, 0));
        assert!(consistency_mask(&dt, &ds, &pose, &k, 0.0).is_err());
    }
}
