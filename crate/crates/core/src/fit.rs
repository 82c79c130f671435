//! Direct depth optimization from known poses.
//!
//! A coarse grid of log-depth values is bilinearly upsampled to full
//! resolution and fitted by gradient descent on the minimum-reprojection
//! photometric loss plus edge-aware smoothness. Every step is accepted only
//! if it passes an Armijo backtracking test, so the loss trace never rises.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{reproject, Intrinsics, Pose};
use crate::error::{param, Error, Result};
use crate::imaging::{bilinear_sample, sample_with_grad, DepthMap, Image, Mask};
use crate::losses::{photometric_error, photometric_error_vjp, smoothness_with_grad, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Grid nodes per side.
    pub grid: usize,
    pub iters: usize,
    pub smoothness_weight: f64,
    pub loss: LossConfig,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Largest per-node log-depth change tried on the first step.
    pub initial_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            iters: 500,
            smoothness_weight: 1e-3,
            loss: LossConfig::default(),
            armijo: 1e-4,
            max_backtracks: 40,
            initial_step: 0.05,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.grid) {
            return param(format!("grid must be between 2 and 32 nodes per side, got {}", self.grid));
        }
        if !(self.smoothness_weight >= 0.0 && self.smoothness_weight.is_finite()) {
            return param("smoothness weight must be finite and non-negative");
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || !(self.initial_step > 0.0) {
            return param("line search constants out of range");
        }
        self.loss.validate()
    }
}

/// Starting depth for the fit.
#[derive(Debug, Clone)]
pub enum FitInit {
    Constant(f64),
    /// Sampled at the grid nodes; holes fall back to the map's valid mean.
    Map(DepthMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    /// No step along the gradient lowered the loss any further.
    LineSearchExhausted,
    ZeroGradient,
    DegeneratePhotometricSignal,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub depth: DepthMap,
    /// Loss before the first step followed by the loss after each step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    /// Set when the images carry no usable photometric gradient.
    pub degenerate: bool,
}

struct Node {
    idx: [usize; 4],
    w: [f64; 4],
}

struct Problem<'a> {
    target: &'a Image,
    sources: &'a [(Image, Pose)],
    k: Intrinsics,
    cfg: FitConfig,
    interp: Vec<Node>,
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    photometric_grad_norm: f64,
}

fn axis_weights(i: usize, len: usize, nodes: usize) -> (usize, f64) {
    let g = if len > 1 { i as f64 * (nodes - 1) as f64 / (len - 1) as f64 } else { 0.0 };
    let i0 = (g.floor() as usize).min(nodes - 2);
    (i0, g - i0 as f64)
}

impl<'a> Problem<'a> {
    fn new(target: &'a Image, sources: &'a [(Image, Pose)], k: Intrinsics, cfg: FitConfig) -> Self {
        let (h, w, n) = (target.height(), target.width(), cfg.grid);
        let mut interp = Vec::with_capacity(h * w);
        for y in 0..h {
            let (r0, fy) = axis_weights(y, h, n);
            for x in 0..w {
                let (c0, fx) = axis_weights(x, w, n);
                interp.push(Node {
                    idx: [r0 * n + c0, r0 * n + c0 + 1, (r0 + 1) * n + c0, (r0 + 1) * n + c0 + 1],
                    w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
                });
            }
        }
        Self { target, sources, k, cfg, interp }
    }

    fn depth(&self, theta: &[f64]) -> DepthMap {
        let w = self.target.width();
        DepthMap::from_fn(self.target.height(), w, |x, y| {
            let node = &self.interp[y * w + x];
            node.idx.iter().zip(node.w).map(|(&j, wj)| theta[j] * wj).sum::<f64>().exp()
        })
    }

    fn evaluate(&self, theta: &[f64], with_grad: bool) -> Result<Evaluation> {
        let (h, w) = (self.target.height(), self.target.width());
        let n = h * w;
        let depth = self.depth(theta);
        let cfg = &self.cfg.loss;

        let mut warps: Vec<(Image, Mask, Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.sources.len());
        let mut best = vec![f64::INFINITY; n];
        let mut owner = vec![usize::MAX; n];
        for (s, (src, pose)) in self.sources.iter().enumerate() {
            let coords = reproject(&depth, pose, &self.k)?;
            let (warp, mask) = bilinear_sample(src, &coords)?;
            let pe = photometric_error(&warp, self.target, cfg)?;
            for p in 0..n {
                if mask.keep()[p] && pe.value[p] < best[p] {
                    best[p] = pe.value[p];
                    owner[p] = s;
                }
            }
            warps.push((warp, mask, coords.u, coords.v));
        }
        let n_valid = owner.iter().filter(|&&o| o != usize::MAX).count();
        if n_valid == 0 {
            return Err(Error::Degenerate("no target pixel is visible in any source".into()));
        }
        let photometric: f64 = best.iter().zip(&owner).filter(|(_, &o)| o != usize::MAX).map(|(v, _)| v).sum::<f64>() / n_valid as f64;
        let (smooth, smooth_grad) = smoothness_with_grad(&depth, self.target)?;
        let loss = photometric + self.cfg.smoothness_weight * smooth;
        if !with_grad {
            return Ok(Evaluation { loss, grad: Vec::new(), photometric_grad_norm: 0.0 });
        }

        let kinv = self.k.inverse_matrix();
        let mut g_depth = vec![0.0; n];
        let ch = self.target.channels();
        let (mut val, mut du, mut dv) = (vec![0.0; ch], vec![0.0; ch], vec![0.0; ch]);
        for (s, (warp, mask, us, vs)) in warps.iter().enumerate() {
            let weights: Vec<f64> = owner.iter().map(|&o| if o == s { 1.0 / n_valid as f64 } else { 0.0 }).collect();
            let g_img = photometric_error_vjp(warp, self.target, &weights, cfg)?;
            let (src, pose) = &self.sources[s];
            let r = pose.rotation();
            let t = pose.translation();
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if !mask.keep()[p] {
                        continue;
                    }
                    sample_with_grad(src, us[p], vs[p], &mut val, &mut du, &mut dv);
                    let gi = &g_img.data()[p * ch..(p + 1) * ch];
                    let gu: f64 = gi.iter().zip(&du).map(|(a, b)| a * b).sum();
                    let gv: f64 = gi.iter().zip(&dv).map(|(a, b)| a * b).sum();
                    if gu == 0.0 && gv == 0.0 {
                        continue;
                    }
                    let a = r * (kinv * Vector3::new(x as f64, y as f64, 1.0));
                    let cam = a * depth.get(x, y) + t;
                    let z2 = cam.z * cam.z;
                    let du_dd = self.k.fx * (a.x * cam.z - cam.x * a.z) / z2;
                    let dv_dd = self.k.fy * (a.y * cam.z - cam.y * a.z) / z2;
                    g_depth[p] += gu * du_dd + gv * dv_dd;
                }
            }
        }

        let nodes = self.cfg.grid * self.cfg.grid;
        let mut photo = vec![0.0; nodes];
        let mut grad = vec![0.0; nodes];
        for (p, node) in self.interp.iter().enumerate() {
            let d = depth.depth()[p];
            let gp = g_depth[p] * d;
            let gs = self.cfg.smoothness_weight * smooth_grad[p] * d;
            for (&j, wj) in node.idx.iter().zip(node.w) {
                photo[j] += gp * wj;
                grad[j] += (gp + gs) * wj;
            }
        }
        let photometric_grad_norm = photo.iter().map(|g| g * g).sum::<f64>().sqrt();
        Ok(Evaluation { loss, grad, photometric_grad_norm })
    }
}

fn initial_theta(init: &FitInit, h: usize, w: usize, n: usize) -> Result<Vec<f64>> {
    match init {
        FitInit::Constant(d) => {
            if !(*d > 0.0 && d.is_finite()) {
                return param(format!("initial depth must be positive, got {d}"));
            }
            Ok(vec![d.ln(); n * n])
        }
        FitInit::Map(map) => {
            map.check_shape(h, w, "fit init")?;
            let count = map.valid_count();
            if count == 0 {
                return param("initial depth map has no valid pixels");
            }
            let mean = map.valid_values().sum::<f64>() / count as f64;
            let mut theta = Vec::with_capacity(n * n);
            for r in 0..n {
                for c in 0..n {
                    let y = ((r as f64 * (h - 1) as f64 / (n - 1) as f64).round() as usize).min(h - 1);
                    let x = ((c as f64 * (w - 1) as f64 / (n - 1) as f64).round() as usize).min(w - 1);
                    let d = if map.is_valid(x, y) && map.get(x, y) > 0.0 { map.get(x, y) } else { mean };
                    theta.push(d.ln());
                }
            }
            Ok(theta)
        }
    }
}

/// Fits a depth map for `target` given source frames and their
/// target-to-source poses.
///
/// Returns the initial depth with `degenerate` set when the photometric term
/// has no gradient at the start (for example on textureless images).
pub fn fit_depth_demo(
    target: &Image,
    sources: &[(Image, Pose)],
    k: &Intrinsics,
    init: &FitInit,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    k.validate()?;
    if sources.is_empty() || sources.len() > 2 {
        return param(format!("fit needs one or two source frames, got {}", sources.len()));
    }
    for (src, _) in sources {
        target.check_same_shape(src, "fit_depth_demo")?;
    }
    let (h, w) = (target.height(), target.width());
    if h < 2 || w < 2 {
        return param("fit needs images of at least 2x2 pixels");
    }
    let problem = Problem::new(target, sources, *k, *cfg);
    let mut theta = initial_theta(init, h, w, cfg.grid)?;

    let mut current = problem.evaluate(&theta, true)?;
    let mut trace = vec![current.loss];
    if current.photometric_grad_norm == 0.0 {
        return Ok(FitResult {
            depth: problem.depth(&theta),
            trace,
            iterations: 0,
            stop: StopReason::DegeneratePhotometricSignal,
            degenerate: true,
        });
    }

    let max_g = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut step = cfg.initial_step / max_g(&current.grad);
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    for it in 0..cfg.iters {
        let g_sq: f64 = current.grad.iter().map(|g| g * g).sum();
        if g_sq == 0.0 {
            stop = StopReason::ZeroGradient;
            break;
        }
        step *= 2.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = theta.iter().zip(&current.grad).map(|(t, g)| t - step * g).collect();
            let loss = problem.evaluate(&trial, false)?.loss;
            if !loss.is_finite() {
                return Err(Error::Optimization { message: "loss became non-finite".into(), trace });
            }
            if loss <= current.loss - cfg.armijo * step * g_sq {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(next) => {
                theta = next;
                current = problem.evaluate(&theta, true)?;
                trace.push(current.loss);
                iterations = it + 1;
            }
            None if it == 0 => {
                return Err(Error::Optimization {
                    message: "line search found no decrease along the initial gradient".into(),
                    trace,
                });
            }
            None => {
                stop = StopReason::LineSearchExhausted;
                break;
            }
        }
    }
    Ok(FitResult { depth: problem.depth(&theta), trace, iterations, stop, degenerate: false })
}
