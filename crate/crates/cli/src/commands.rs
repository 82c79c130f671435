use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use aquadepth::camera::{rotate_center_crop, rotate_center_crop_depth, synthesize_view, Intrinsics, Pose, RotationSpec};
use aquadepth::config::PipelineConfig;
use aquadepth::dataset::{self, depth_key, Frame};
use aquadepth::enhance::{self, estimate_scene_model, SceneSampling, WaterModel};
use aquadepth::eval::{depth_metrics, median_scale, MetricReport};
use aquadepth::fit::{fit_depth_demo, FitInit};
use aquadepth::imaging::{DepthMap, Image, Mask};
use aquadepth::io::{self, PngDepth};
use aquadepth::losses::{min_reprojection_loss, photometric_error, smoothness_loss};
use aquadepth::masking::{auto_mask, consistency_mask_multi, teacher_loss_map, tgam_mask, SourceDepth};
use aquadepth::{Error, Result};

use crate::{EnhanceArgs, EvalArgs, FitArgs, LossesArgs, MaskMode, MasksArgs, RotateArgs, SimulateArgs, SplitArgs};

fn bad(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

fn scene_name(dir: &Path) -> String {
    dir.file_name().and_then(|n| n.to_str()).unwrap_or("frames").to_owned()
}

/// Image/depth pairs from two directories; frames without depth are reported.
fn paired_frames(images: &Path, depths: &Path, warnings: &mut Vec<String>) -> Result<Vec<(Frame, PathBuf)>> {
    let frames = dataset::pair_directory(images, depths, &scene_name(images), warnings)?;
    let paired: Vec<(Frame, PathBuf)> = frames
        .into_iter()
        .filter_map(|f| {
            let d = f.depth.clone()?;
            Some((f, d))
        })
        .collect();
    if paired.is_empty() {
        return Err(bad(format!("no image in {} has a depth map in {}", images.display(), depths.display())));
    }
    Ok(paired)
}

fn camera_for(path: &Path, img: &Image) -> Result<Intrinsics> {
    let cam = io::read_camera(path)?;
    if cam.width != img.width() || cam.height != img.height() {
        return Err(bad(format!(
            "camera file is for {}x{} but the image is {}x{}",
            cam.width,
            cam.height,
            img.width(),
            img.height()
        )));
    }
    cam.intrinsics()
}

fn poses_for(path: &Path, count: usize) -> Result<Vec<Pose>> {
    let poses = io::read_poses(path)?;
    if poses.len() != count {
        return Err(bad(format!("{} poses given for {count} source frames", poses.len())));
    }
    Ok(poses)
}

pub fn enhance(a: &EnhanceArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let mut warnings = Vec::new();
    let frames = paired_frames(&a.images, &a.depths, &mut warnings)?;
    let model: WaterModel = match &a.model {
        Some(path) => io::read_water_model(path)?,
        None => {
            let loaded = cfg
                .scene_sampling
                .select(&frames)
                .into_iter()
                .map(|i| Ok((io::read_image(&frames[i].0.image)?, io::read_depth(&frames[i].1)?)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(&Image, &DepthMap)> = loaded.iter().map(|(i, d)| (i, d)).collect();
            estimate_scene_model(&refs, &SceneSampling { stride: 1 })?
        }
    };
    io::write_water_model(&out.join("model.json"), &model)?;
    for (frame, depth_path) in &frames {
        let img = io::read_image(&frame.image)?;
        let depth = io::read_depth(depth_path)?;
        let enhanced = enhance::enhance(&img, &depth, &model, &cfg.sharpen)?;
        io::write_png(&out.join(format!("{}.png", frame.basename)), &enhanced, PngDepth::Eight)?;
    }
    io::write_json(
        &out.join("enhance.json"),
        &json!({ "model": model, "estimated": a.model.is_none(), "frames": frames.len(), "warnings": warnings }),
    )
}

pub fn simulate(a: &SimulateArgs, out: &Path) -> Result<()> {
    let model = io::read_water_model(&a.model)?;
    let mut warnings = Vec::new();
    let frames = paired_frames(&a.clean, &a.depths, &mut warnings)?;
    for (frame, depth_path) in &frames {
        let clean = io::read_image(&frame.image)?;
        let depth = io::read_depth(depth_path)?;
        let degraded = enhance::degrade(&clean, &depth, &model)?;
        io::write_png(&out.join(format!("{}.png", frame.basename)), &degraded, PngDepth::Sixteen)?;
    }
    io::write_json(&out.join("simulate.json"), &json!({ "model": model, "frames": frames.len(), "warnings": warnings }))
}

pub fn losses(a: &LossesArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let target = io::read_image(&a.target)?;
    let depth = io::read_depth(&a.depth)?;
    let k = camera_for(&a.k, &target)?;
    let poses = poses_for(&a.poses, a.sources.len())?;
    let mut warps = Vec::with_capacity(a.sources.len());
    let mut per_source = Vec::with_capacity(a.sources.len());
    for (i, (path, pose)) in a.sources.iter().zip(&poses).enumerate() {
        let src = io::read_image(path)?;
        let (warp, mask) = synthesize_view(&src, &depth, pose, &k)?;
        let pe = photometric_error(&target, &warp, &cfg.loss)?.masked(&mask)?;
        io::write_loss_map(&out.join(format!("pe_{i}.tif")), &pe)?;
        per_source.push(json!({ "source": path, "mean": pe.mean(), "valid_fraction": mask.keep_rate() }));
        warps.push((warp, mask));
    }
    let min_map = min_reprojection_loss(&target, &warps, &cfg.loss)?;
    io::write_loss_map(&out.join("min_reprojection.tif"), &min_map)?;
    let smooth = smoothness_loss(&depth, &target)?;
    io::write_json(
        &out.join("losses.json"),
        &json!({
            "per_source": per_source,
            "min_reprojection_mean": min_map.mean(),
            "valid_fraction": min_map.valid_count() as f64 / (min_map.width * min_map.height) as f64,
            "smoothness": smooth,
        }),
    )
}

/// One record of the `masks --frames` file. Relative paths resolve against
/// the file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFrame {
    target: PathBuf,
    depth: PathBuf,
    #[serde(default)]
    sources: Vec<PathBuf>,
    #[serde(default)]
    source_depths: Vec<PathBuf>,
    poses: Vec<[[f64; 4]; 4]>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn masks(a: &MasksArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(&a.frames)?;
    let records: Vec<MaskFrame> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", a.frames.display())))?;
    let base = a.frames.parent().unwrap_or(Path::new("."));
    let mut state = cfg.tgam.state()?;
    let mut entries = Vec::with_capacity(records.len());
    let mut thresholds = Vec::new();

    for (i, rec) in records.iter().enumerate() {
        let target = io::read_image(&resolve(base, &rec.target))?;
        let depth = io::read_depth(&resolve(base, &rec.depth))?;
        let k = camera_for(&a.k, &target)?;
        let poses = rec.poses.iter().map(Pose::from_rows).collect::<Result<Vec<_>>>()?;
        let inputs = if a.mode == MaskMode::Consistency { rec.source_depths.len() } else { rec.sources.len() };
        if inputs == 0 || poses.len() != inputs {
            return Err(bad(format!("frame {i}: {} poses for {inputs} sources", poses.len())));
        }
        let mut threshold = None;
        let mask: Mask = match a.mode {
            MaskMode::Tgam | MaskMode::Am => {
                let sources = rec.sources.iter().map(|p| io::read_image(&resolve(base, p))).collect::<Result<Vec<_>>>()?;
                let warps = sources
                    .iter()
                    .zip(&poses)
                    .map(|(s, p)| synthesize_view(s, &depth, p, &k))
                    .collect::<Result<Vec<_>>>()?;
                if a.mode == MaskMode::Tgam {
                    let loss = teacher_loss_map(&target, &warps, &cfg.blur, &cfg.loss)?;
                    let t = state.update(&loss)?;
                    thresholds.push(t);
                    threshold = Some(t);
                    tgam_mask(&loss, t)?
                } else {
                    auto_mask(&target, &sources, &warps, &cfg.loss)?
                }
            }
            MaskMode::Consistency => {
                let depths = rec.source_depths.iter().map(|p| io::read_depth(&resolve(base, p))).collect::<Result<Vec<_>>>()?;
                let sources: Vec<SourceDepth<'_>> =
                    depths.iter().zip(&poses).map(|(d, p)| SourceDepth { depth: d, pose_ts: p }).collect();
                consistency_mask_multi(&depth, &sources, &k, cfg.distill.tau)?
            }
        };
        let stem = rec.target.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let name = format!("{i:04}_{stem}.png");
        io::write_mask(&out.join(&name), &mask)?;
        entries.push(json!({ "mask": name, "keep_rate": mask.keep_rate(), "threshold": threshold }));
    }
    let mode = match a.mode {
        MaskMode::Tgam => "tgam",
        MaskMode::Am => "am",
        MaskMode::Consistency => "consistency",
    };
    let mut summary = json!({ "mode": mode, "frames": entries });
    if a.mode == MaskMode::Tgam {
        summary["thresholds"] = json!(thresholds);
        summary["state"] = json!(state);
    }
    io::write_json(&out.join("masks.json"), &summary)
}

fn depth_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !path.is_file() || !matches!(ext.as_str(), "tif" | "tiff" | "pfm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_owned();
        let key = depth_key(&stem).unwrap_or(&stem).to_owned();
        map.insert(key, path);
    }
    Ok(map)
}

pub fn eval(a: &EvalArgs, out: &Path) -> Result<()> {
    let preds = depth_files(&a.pred)?;
    let gts = depth_files(&a.gt)?;
    let mut warnings = Vec::new();
    let mut reports = Vec::new();
    let mut per_image = Vec::new();
    for (name, pred_path) in &preds {
        let Some(gt_path) = gts.get(name) else {
            warnings.push(format!("prediction {name} has no ground truth"));
            continue;
        };
        let pred = io::read_depth(pred_path)?;
        let gt = io::read_depth(gt_path)?;
        let pred = if a.median_scale { median_scale(&pred, &gt)? } else { pred };
        let report = depth_metrics(&pred, &gt)?;
        per_image.push(json!({ "name": name, "report": report }));
        reports.push(report);
    }
    for name in gts.keys().filter(|k| !preds.contains_key(*k)) {
        warnings.push(format!("ground truth {name} has no prediction"));
    }
    let mean = MetricReport::mean_of(&reports).ok_or_else(|| bad("no prediction/ground-truth pairs found"))?;
    io::write_json(
        &out.join("metrics.json"),
        &json!({ "median_scaled": a.median_scale, "mean": mean, "per_image": per_image, "warnings": warnings }),
    )?;
    let table = format!("{mean}\n");
    std::fs::write(out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn split(a: &SplitArgs, out: &Path) -> Result<()> {
    let scan = dataset::scan_scenes(&a.root)?;
    let split = dataset::generate_ouc_split(&scan.scenes);
    dataset::write_split(out, &split)?;
    let warnings: Vec<&String> = scan.warnings.iter().chain(&split.warnings).collect();
    io::write_json(
        &out.join("split.json"),
        &json!({
            "scenes": scan.scenes.len(),
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "train_triplets": dataset::eligible_triplets(&split.train).len(),
            "warnings": warnings,
        }),
    )
}

pub fn rotate(a: &RotateArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let gamma = a.gamma.unwrap_or(cfg.rotation.gamma);
    let mut warnings = Vec::new();
    let frames = paired_frames(&a.images, &a.depths, &mut warnings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut records = Vec::with_capacity(frames.len());
    for (frame, depth_path) in &frames {
        let spec = RotationSpec::from_unit(gamma, rng.gen::<f64>())?;
        let img = io::read_image(&frame.image)?;
        let depth = io::read_depth(depth_path)?;
        let rotated = rotate_center_crop(&img, &spec)?;
        let rotated_depth = rotate_center_crop_depth(&depth, &spec)?;
        io::write_png(&out.join(format!("{}.png", frame.basename)), &rotated, PngDepth::Eight)?;
        io::write_depth(&out.join(format!("{}_depth.tif", frame.basename)), &rotated_depth)?;
        records.push(json!({
            "name": frame.basename,
            "theta": spec.theta,
            "height": rotated.height(),
            "width": rotated.width(),
        }));
    }
    io::write_json(
        &out.join("rotations.json"),
        &json!({ "gamma": gamma, "seed": a.seed, "frames": records, "warnings": warnings }),
    )
}

pub fn fit_depth(a: &FitArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let target = io::read_image(&a.frames[0])?;
    let k = camera_for(&a.k, &target)?;
    let poses = poses_for(&a.poses, a.frames.len() - 1)?;
    let sources = a.frames[1..]
        .iter()
        .zip(poses)
        .map(|(p, pose)| Ok((io::read_image(p)?, pose)))
        .collect::<Result<Vec<_>>>()?;
    let mut fit_cfg = cfg.fit;
    if let Some(g) = a.grid {
        fit_cfg.grid = g;
    }
    if let Some(n) = a.iters {
        fit_cfg.iters = n;
    }
    let result = fit_depth_demo(&target, &sources, &k, &FitInit::Constant(a.init), &fit_cfg)?;
    io::write_depth(&out.join("depth.tif"), &result.depth)?;
    let metrics = match &a.gt {
        Some(path) => Some(depth_metrics(&result.depth, &io::read_depth(path)?)?),
        None => None,
    };
    io::write_json(
        &out.join("fit.json"),
        &json!({
            "iterations": result.iterations,
            "stop": result.stop,
            "degenerate": result.degenerate,
            "final_loss": result.trace.last(),
            "trace": result.trace,
            "metrics": metrics,
        }),
    )
}
