//! Photometric, smoothness and distillation losses.
//!
//! Per-pixel losses are returned as [`LossMap`]s; scalar losses reduce by the
//! mean over valid pixels.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::imaging::{reflect, DepthMap, Image, Mask};

/// Photometric loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the SSIM term against L1.
    pub alpha: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.85, ssim_window: 3, ssim_c1: 0.01 * 0.01, ssim_c2: 0.03 * 0.03 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return param(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return param(format!("SSIM window must be odd and >= 3, got {}", self.ssim_window));
        }
        if !(self.ssim_c1 > 0.0) || !(self.ssim_c2 > 0.0) {
            return param("SSIM stabilizers must be positive");
        }
        Ok(())
    }
}

/// Per-pixel non-negative loss with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    pub height: usize,
    pub width: usize,
    pub value: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LossMap {
    pub fn new(height: usize, width: usize, value: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if value.len() != height * width || valid.len() != height * width || height * width == 0 {
            return param("loss map buffers do not match its shape");
        }
        Ok(Self { height, width, value, valid })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.value[y * self.width + x]
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.value.iter().zip(&self.valid).filter(|(_, ok)| **ok).map(|(v, _)| *v).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Mean over valid pixels, `None` when none are valid.
    pub fn mean(&self) -> Option<f64> {
        let vals = self.valid_values();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Restricts validity to pixels kept by `mask`.
    pub fn masked(&self, mask: &Mask) -> Result<LossMap> {
        if mask.height() != self.height || mask.width() != self.width {
            return param("mask does not match loss map");
        }
        Ok(LossMap {
            valid: self.valid.iter().zip(mask.keep()).map(|(a, b)| *a && *b).collect(),
            ..self.clone()
        })
    }
}

/// How the distillation weight decays over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaDecay {
    /// Linear from `lambda0` at step 0 to zero at `horizon_steps`.
    Linear { horizon_steps: u64 },
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// 3-D consistency threshold (L1 distance in scene units).
    pub tau: f64,
    pub lambda0: f64,
    pub decay: LambdaDecay,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { tau: 0.03, lambda0: 1.0, decay: LambdaDecay::Linear { horizon_steps: 100_000 } }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return param(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda0 >= 0.0) {
            return param(format!("lambda0 must be non-negative, got {}", self.lambda0));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        match self.decay {
            LambdaDecay::Constant => self.lambda0,
            LambdaDecay::Linear { horizon_steps: 0 } => 0.0,
            LambdaDecay::Linear { horizon_steps } => {
                self.lambda0 * (1.0 - step as f64 / horizon_steps as f64).max(0.0)
            }
        }
    }
}

/// Raw window moments of one channel at one pixel.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    mu_a: f64,
    mu_b: f64,
    aa: f64,
    bb: f64,
    ab: f64,
}

impl Moments {
    fn ssim(&self, c1: f64, c2: f64) -> f64 {
        let (n1, n2, d1, d2) = self.terms(c1, c2);
        (n1 * n2) / (d1 * d2)
    }

    fn terms(&self, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
        let var_a = self.aa - self.mu_a * self.mu_a;
        let var_b = self.bb - self.mu_b * self.mu_b;
        let cov = self.ab - self.mu_a * self.mu_b;
        (
            2.0 * self.mu_a * self.mu_b + c1,
            2.0 * cov + c2,
            self.mu_a * self.mu_a + self.mu_b * self.mu_b + c1,
            var_a + var_b + c2,
        )
    }

    /// Partial derivatives of SSIM w.r.t. `(mu_a, E[a²], E[ab])`.
    fn ssim_partials_a(&self, c1: f64, c2: f64) -> (f64, f64, f64) {
        let (n1, n2, d1, d2) = self.terms(c1, c2);
        let num = n1 * n2;
        let den = d1 * d2;
        let (ma, mb) = (self.mu_a, self.mu_b);
        let dnum_dmu = 2.0 * mb * n2 - 2.0 * mb * n1;
        let dden_dmu = 2.0 * ma * d2 - 2.0 * ma * d1;
        let d_mu = (dnum_dmu * den - num * dden_dmu) / (den * den);
        let d_aa = -num * d1 / (den * den);
        let d_ab = 2.0 * n1 / den;
        (d_mu, d_aa, d_ab)
    }
}

fn window_moments(a: &Image, b: &Image, cfg: &LossConfig) -> Vec<Moments> {
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let r = (cfg.ssim_window / 2) as isize;
    let n = (cfg.ssim_window * cfg.ssim_window) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![Moments::default(); h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for dy in -r..=r {
                let sy = reflect(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = reflect(x as isize + dx, w);
                    let s = (sy * w + sx) * ch;
                    for c in 0..ch {
                        let m = &mut out[(y * w + x) * ch + c];
                        let (av, bv) = (ad[s + c], bd[s + c]);
                        m.mu_a += av;
                        m.mu_b += bv;
                        m.aa += av * av;
                        m.bb += bv * bv;
                        m.ab += av * bv;
                    }
                }
            }
        }
    }
    for m in &mut out {
        m.mu_a /= n;
        m.mu_b /= n;
        m.aa /= n;
        m.bb /= n;
        m.ab /= n;
    }
    out
}

/// Channel-averaged SSIM over a uniform window with reflection padding.
pub fn ssim_map(a: &Image, b: &Image, cfg: &LossConfig) -> Result<LossMap> {
    cfg.validate()?;
    a.check_same_shape(b, "ssim_map")?;
    let ch = a.channels();
    let moments = window_moments(a, b, cfg);
    let value = moments
        .chunks(ch)
        .map(|px| px.iter().map(|m| m.ssim(cfg.ssim_c1, cfg.ssim_c2)).sum::<f64>() / ch as f64)
        .collect();
    LossMap::new(a.height(), a.width(), value, vec![true; a.pixel_count()])
}

/// `alpha/2 · (1 − SSIM) + (1 − alpha) · mean_c |a − b|` per pixel.
pub fn photometric_error(a: &Image, b: &Image, cfg: &LossConfig) -> Result<LossMap> {
    let ssim = ssim_map(a, b, cfg)?;
    let ch = a.channels();
    let value = a
        .data()
        .chunks(ch)
        .zip(b.data().chunks(ch))
        .zip(&ssim.value)
        .map(|((pa, pb), s)| {
            let l1 = pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch as f64;
            cfg.alpha / 2.0 * (1.0 - s) + (1.0 - cfg.alpha) * l1
        })
        .collect();
    LossMap::new(a.height(), a.width(), value, ssim.valid)
}

/// Mean of [`photometric_error`] over all pixels.
pub fn photometric_error_mean(a: &Image, b: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(photometric_error(a, b, cfg)?.mean().unwrap_or(0.0))
}

/// Gradient of `Σ_p weights[p] · pe(a, b)[p]` with respect to `a`.
///
/// Because `pe` is symmetric, the gradient with respect to `b` is obtained by
/// swapping the arguments.
pub fn photometric_error_vjp(a: &Image, b: &Image, weights: &[f64], cfg: &LossConfig) -> Result<Image> {
    cfg.validate()?;
    a.check_same_shape(b, "photometric_error_vjp")?;
    if weights.len() != a.pixel_count() {
        return param("weight buffer does not match image");
    }
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let r = (cfg.ssim_window / 2) as isize;
    let n = (cfg.ssim_window * cfg.ssim_window) as f64;
    let moments = window_moments(a, b, cfg);
    let (ad, bd) = (a.data(), b.data());
    let mut grad = vec![0.0; ad.len()];
    let ssim_scale = -cfg.alpha / 2.0 / ch as f64;
    let l1_scale = (1.0 - cfg.alpha) / ch as f64;

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let wp = weights[p];
            if wp == 0.0 {
                continue;
            }
            for c in 0..ch {
                let i = p * ch + c;
                let diff = ad[i] - bd[i];
                if diff != 0.0 {
                    grad[i] += wp * l1_scale * diff.signum();
                }
                let (g_mu, g_aa, g_ab) = moments[i].ssim_partials_a(cfg.ssim_c1, cfg.ssim_c2);
                let k = wp * ssim_scale / n;
                for dy in -r..=r {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        let sx = reflect(x as isize + dx, w);
                        let q = (sy * w + sx) * ch + c;
                        grad[q] += k * (g_mu + 2.0 * g_aa * ad[q] + g_ab * bd[q]);
                    }
                }
            }
        }
    }
    Image::new(h, w, ch, grad)
}

/// Gradient of [`photometric_error_mean`] with respect to `a`.
pub fn photometric_error_grad(a: &Image, b: &Image, cfg: &LossConfig) -> Result<Image> {
    let n = a.pixel_count();
    photometric_error_vjp(a, b, &vec![1.0 / n as f64; n], cfg)
}

/// Per-pixel minimum of the photometric error over the warps valid there.
///
/// Pixels no warp covers are invalid in the result.
pub fn min_reprojection_loss(target: &Image, warps: &[(Image, Mask)], cfg: &LossConfig) -> Result<LossMap> {
    if warps.is_empty() {
        return param("min_reprojection_loss needs at least one warp");
    }
    let n = target.pixel_count();
    let mut value = vec![f64::INFINITY; n];
    let mut valid = vec![false; n];
    for (warp, mask) in warps {
        if mask.height() != target.height() || mask.width() != target.width() {
            return param("warp mask does not match target");
        }
        let pe = photometric_error(target, warp, cfg)?;
        for i in 0..n {
            if mask.keep()[i] && pe.value[i] < value[i] {
                value[i] = pe.value[i];
                valid[i] = true;
            }
        }
    }
    for (v, ok) in value.iter_mut().zip(&valid) {
        if !ok {
            *v = 0.0;
        }
    }
    LossMap::new(target.height(), target.width(), value, valid)
}

/// Channel-averaged absolute forward differences of `img`.
fn edge_weights(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut ex = vec![0.0; h * w];
    let mut ey = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                let g: f64 = (0..ch).map(|c| (img.get(x + 1, y, c) - img.get(x, y, c)).abs()).sum();
                ex[p] = (-g / ch as f64).exp();
            }
            if y + 1 < h {
                let g: f64 = (0..ch).map(|c| (img.get(x, y + 1, c) - img.get(x, y, c)).abs()).sum();
                ey[p] = (-g / ch as f64).exp();
            }
        }
    }
    (ex, ey)
}

/// Edge-aware smoothness on mean-normalized depth, with its gradient with
/// respect to the raw depth values.
pub(crate) fn smoothness_with_grad(depth: &DepthMap, img: &Image) -> Result<(f64, Vec<f64>)> {
    let (h, w) = (img.height(), img.width());
    depth.check_shape(h, w, "smoothness_loss")?;
    let n_valid = depth.valid_count();
    if n_valid == 0 {
        return param("smoothness_loss: depth map has no valid pixels");
    }
    let mean = depth.valid_values().sum::<f64>() / n_valid as f64;
    if !(mean > 0.0) {
        return param("smoothness_loss: mean depth must be positive");
    }
    let (ex, ey) = edge_weights(img);
    let d = depth.depth();
    let ok = depth.valid();
    let mut total = 0.0;
    // Gradient w.r.t. normalized depth first.
    let mut g_norm = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !ok[p] {
                continue;
            }
            if x + 1 < w && ok[p + 1] {
                let diff = (d[p + 1] - d[p]) / mean;
                total += diff.abs() * ex[p];
                let s = diff.signum() * ex[p] * (diff != 0.0) as u8 as f64;
                g_norm[p + 1] += s;
                g_norm[p] -= s;
            }
            if y + 1 < h && ok[p + w] {
                let diff = (d[p + w] - d[p]) / mean;
                total += diff.abs() * ey[p];
                let s = diff.signum() * ey[p] * (diff != 0.0) as u8 as f64;
                g_norm[p + w] += s;
                g_norm[p] -= s;
            }
        }
    }
    let nv = n_valid as f64;
    let value = total / nv;
    // d*_q = d_q / m with m the valid mean: ∂/∂d_k = g_k/m − Σ_q g_q d_q / (m² n).
    let coupling: f64 = g_norm.iter().zip(d).zip(ok).filter(|(_, o)| **o).map(|((g, v), _)| g * v).sum();
    let grad = g_norm
        .iter()
        .zip(ok)
        .map(|(g, o)| if *o { (g / mean - coupling / (mean * mean * nv)) / nv } else { 0.0 })
        .collect();
    Ok((value, grad))
}

/// Mean over valid pixels of `|∂x d*| e^{−|∂x I|} + |∂y d*| e^{−|∂y I|}`,
/// where `d*` is depth divided by its valid mean.
///
/// Differences that touch a hole, and those past the last row/column, are zero.
pub fn smoothness_loss(depth: &DepthMap, img: &Image) -> Result<f64> {
    smoothness_with_grad(depth, img).map(|(v, _)| v)
}

/// Result of [`distillation_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    /// Number of pixels that contributed.
    pub supervised: usize,
}

impl DistillLoss {
    pub fn has_supervision(&self) -> bool {
        self.supervised > 0
    }
}

/// Mean of `λ · log(|d_t − d_s| + 1)` over pixels kept by `m_c` where both
/// depths are valid. An empty selection yields zero with no supervision.
pub fn distillation_loss(d_s: &DepthMap, d_t: &DepthMap, m_c: &Mask, lambda: f64) -> Result<DistillLoss> {
    let (h, w) = (d_t.height(), d_t.width());
    d_s.check_shape(h, w, "distillation_loss")?;
    if m_c.height() != h || m_c.width() != w {
        return param("distillation_loss: mask does not match depth");
    }
    if !(lambda >= 0.0) {
        return param(format!("distillation weight must be non-negative, got {lambda}"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..h * w {
        if m_c.keep()[i] && d_s.valid()[i] && d_t.valid()[i] {
            sum += ((d_t.depth()[i] - d_s.depth()[i]).abs() + 1.0).ln();
            count += 1;
        }
    }
    let value = if count == 0 { 0.0 } else { lambda * sum / count as f64 };
    Ok(DistillLoss { value, supervised: count })
}

struct Centered {
    idx: Vec<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn centered_pairs(d_s: &DepthMap, d_t: &DepthMap) -> Result<Centered> {
    d_s.check_shape(d_t.height(), d_t.width(), "pearson_loss")?;
    let idx: Vec<usize> = (0..d_s.depth().len()).filter(|&i| d_s.valid()[i] && d_t.valid()[i]).collect();
    if idx.len() < 2 {
        return param("pearson_loss needs at least two jointly valid pixels");
    }
    let n = idx.len() as f64;
    let mx = idx.iter().map(|&i| d_s.depth()[i]).sum::<f64>() / n;
    let my = idx.iter().map(|&i| d_t.depth()[i]).sum::<f64>() / n;
    let xs: Vec<f64> = idx.iter().map(|&i| d_s.depth()[i] - mx).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| d_t.depth()[i] - my).collect();
    let sxx: f64 = xs.iter().map(|v| v * v).sum();
    let syy: f64 = ys.iter().map(|v| v * v).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson_loss: depth has zero variance over valid pixels".into()));
    }
    Ok(Centered { idx, xs, ys, sxx, syy, sxy })
}

/// `1 − r` where `r` is the Pearson correlation of the jointly valid depths.
///
/// Invariant to positive affine changes of either map; range `[0, 2]`.
pub fn pearson_loss(d_s: &DepthMap, d_t: &DepthMap) -> Result<f64> {
    let c = centered_pairs(d_s, d_t)?;
    let r = c.sxy / (c.sxx * c.syy).sqrt();
    Ok(1.0 - r.clamp(-1.0, 1.0))
}

/// Gradient of [`pearson_loss`] with respect to `d_s`; zero off the joint support.
pub fn pearson_loss_grad(d_s: &DepthMap, d_t: &DepthMap) -> Result<Vec<f64>> {
    let c = centered_pairs(d_s, d_t)?;
    let norm = (c.sxx * c.syy).sqrt();
    let r = c.sxy / norm;
    let mut grad = vec![0.0; d_s.depth().len()];
    for (k, &i) in c.idx.iter().enumerate() {
        grad[i] = -(c.ys[k] / norm - r * c.xs[k] / c.sxx);
    }
    Ok(grad)
}
