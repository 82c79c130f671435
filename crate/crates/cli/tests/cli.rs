use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aquadepth::camera::Pose;
use aquadepth::enhance::WaterModel;
use aquadepth::imaging::{DepthMap, Image};
use aquadepth::io::{self, PngDepth};
use aquadepth::synth::PlaneScene;
use serde_json::{json, Value};
use tempfile::{tempdir, TempDir};

const H: usize = 40;
const W: usize = 56;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquadepth")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn translation(tx: f64, ty: f64) -> Pose {
    Pose::from_rows(&[[1.0, 0.0, 0.0, tx], [0.0, 1.0, 0.0, ty], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap()
}

/// Rendered plane viewed from three cameras, written as 16-bit PNGs with
/// ground-truth depth, a camera file and target-to-source poses.
struct Sequence {
    _dir: TempDir,
    root: PathBuf,
    frames: Vec<PathBuf>,
    depths: Vec<PathBuf>,
    poses: Vec<Pose>,
    camera: PathBuf,
}

fn sequence(scene: PlaneScene) -> Sequence {
    let dir = tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let poses = vec![Pose::identity(), translation(0.12, 0.0), translation(-0.1, 0.03)];
    std::fs::create_dir_all(root.join("imgs")).unwrap();
    std::fs::create_dir_all(root.join("depth")).unwrap();
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let img = root.join("imgs").join(format!("{:04}.png", i + 1));
        let depth = root.join("depth").join(format!("{:04}_abs_depth.tif", i + 1));
        io::write_png(&img, &scene.render(pose), PngDepth::Sixteen).unwrap();
        io::write_depth(&depth, &scene.depth(pose)).unwrap();
        frames.push(img);
        depths.push(depth);
    }
    let camera = root.join("camera.json");
    let k = scene.k;
    io::write_json(&camera, &json!({ "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": W, "height": H })).unwrap();
    Sequence { _dir: dir, root, frames, depths, poses, camera }
}

fn plane_sequence() -> Sequence {
    sequence(PlaneScene::fronto_parallel(H, W, 2.0))
}

#[test]
fn manifest_is_written() {
    let dir = tempdir().unwrap();
    run_ok(&["manifest", "--out", s(dir.path())]);
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["version"], 1);
    assert!(m["ops"].as_array().unwrap().iter().any(|o| o["name"] == "consistency_mask"));
}

#[test]
fn simulate_then_enhance_with_known_and_estimated_models() {
    // Attenuation needs depth variation, which a fronto-parallel plane lacks.
    let seq = sequence(PlaneScene::slanted(H, W, 2.0));
    // Black specks give the backscatter estimate its darkest pixels.
    for path in &seq.frames {
        let img = io::read_image(path).unwrap();
        let specked = Image::from_fn(H, W, 3, |x, y, c| if (x * 7 + y * 3) % 97 == 0 { 0.0 } else { img.get(x, y, c) });
        io::write_png(path, &specked, PngDepth::Sixteen).unwrap();
    }
    let model = WaterModel::new([0.1, 0.2, 0.25], [0.35, 0.12, 0.06]).unwrap();
    let model_path = seq.root.join("water.json");
    io::write_water_model(&model_path, &model).unwrap();

    let sim = seq.root.join("sim");
    run_ok(&[
        "simulate", "--clean", s(&seq.root.join("imgs")), "--depths", s(&seq.root.join("depth")),
        "--model", s(&model_path), "--out", s(&sim),
    ]);
    assert_eq!(read_json(&sim.join("simulate.json"))["frames"], 3);
    let degraded = io::read_image(&sim.join("0001.png")).unwrap();
    let clean = io::read_image(&seq.frames[0]).unwrap();
    let depth = io::read_depth(&seq.depths[0]).unwrap();
    let expect = aquadepth::enhance::degrade(&clean, &depth, &model).unwrap();
    let diff = degraded.data().iter().zip(expect.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "simulate output differs by {diff}");

    let known = seq.root.join("known");
    run_ok(&[
        "enhance", "--images", s(&sim), "--depths", s(&seq.root.join("depth")), "--model", s(&model_path),
        "--out", s(&known),
    ]);
    let summary = read_json(&known.join("enhance.json"));
    assert_eq!(summary["estimated"], false);
    assert_eq!(summary["frames"], 3);
    for i in 1..=3 {
        assert!(known.join(format!("{i:04}.png")).is_file());
    }

    let est = seq.root.join("est");
    run_ok(&["enhance", "--images", s(&sim), "--depths", s(&seq.root.join("depth")), "--estimate", "--out", s(&est)]);
    let fitted: WaterModel = serde_json::from_value(read_json(&est.join("model.json"))).unwrap();
    for c in 0..3 {
        assert!((fitted.backscatter[c] - model.backscatter[c]).abs() < 0.02, "{fitted:?}");
    }
}

#[test]
fn losses_prefer_true_depth() {
    let seq = plane_sequence();
    let poses = seq.root.join("poses.json");
    io::write_poses(&poses, &seq.poses[1..]).unwrap();
    let wrong = seq.root.join("wrong.tif");
    io::write_depth(&wrong, &io::read_depth(&seq.depths[0]).unwrap().scaled(1.6)).unwrap();

    let mut means = Vec::new();
    for (name, depth) in [("true", &seq.depths[0]), ("wrong", &wrong)] {
        let out = seq.root.join(name);
        run_ok(&[
            "losses", "--target", s(&seq.frames[0]), "--sources", s(&seq.frames[1]), s(&seq.frames[2]),
            "--depth", s(depth), "--poses", s(&poses), "--K", s(&seq.camera), "--out", s(&out),
        ]);
        for file in ["pe_0.tif", "pe_1.tif", "min_reprojection.tif"] {
            assert!(out.join(file).is_file(), "{name}: {file}");
        }
        means.push(read_json(&out.join("losses.json"))["min_reprojection_mean"].as_f64().unwrap());
    }
    assert!(means[0] < 0.5 * means[1], "true {} vs wrong {}", means[0], means[1]);
}

fn mask_frames(seq: &Sequence) -> PathBuf {
    // Every frame serves as a target once, with the other two as sources.
    let mut records = Vec::new();
    for t in 0..3 {
        let others: Vec<usize> = (0..3).filter(|&i| i != t).collect();
        let rel = |p: &Path| p.strip_prefix(&seq.root).unwrap().to_path_buf();
        let poses: Vec<_> = others.iter().map(|&o| seq.poses[o].compose(&seq.poses[t].inverse()).to_rows()).collect();
        records.push(json!({
            "target": rel(&seq.frames[t]),
            "depth": rel(&seq.depths[t]),
            "sources": others.iter().map(|&o| rel(&seq.frames[o])).collect::<Vec<_>>(),
            "source_depths": others.iter().map(|&o| rel(&seq.depths[o])).collect::<Vec<_>>(),
            "poses": poses,
        }));
    }
    let path = seq.root.join("frames.json");
    io::write_json(&path, &records).unwrap();
    path
}

#[test]
fn masks_in_every_mode() {
    let seq = sequence(PlaneScene::slanted(H, W, 2.0));
    let frames = mask_frames(&seq);
    for mode in ["tgam", "am", "consistency"] {
        let out = seq.root.join(mode);
        run_ok(&["masks", "--mode", mode, "--frames", s(&frames), "--K", s(&seq.camera), "--out", s(&out)]);
        let summary = read_json(&out.join("masks.json"));
        let entries = summary["frames"].as_array().unwrap();
        assert_eq!(entries.len(), 3, "{mode}");
        for e in entries {
            let mask = io::read_mask(&out.join(e["mask"].as_str().unwrap())).unwrap();
            assert_eq!((mask.height(), mask.width()), (H, W));
            assert!((mask.keep_rate() - e["keep_rate"].as_f64().unwrap()).abs() < 1e-12);
        }
        match mode {
            "tgam" => {
                let t = summary["thresholds"].as_array().unwrap();
                assert_eq!(t.len(), 3);
                assert_eq!(summary["state"]["threshold"], t[2]);
                assert!(entries.iter().all(|e| e["keep_rate"].as_f64().unwrap() < 1.0));
            }
            "consistency" => {
                assert!(entries.iter().all(|e| e["keep_rate"].as_f64().unwrap() > 0.7), "{summary}");
            }
            _ => assert!(summary.get("thresholds").is_none()),
        }
    }
}

#[test]
fn eval_pairs_by_stem_and_median_scales() {
    let dir = tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for i in 1..=3 {
        let d = DepthMap::from_fn(12, 16, |x, y| 1.0 + 0.1 * (x + y * i) as f64);
        io::write_depth(&gt.join(format!("{i:04}_abs_depth.tif")), &d).unwrap();
        io::write_depth(&pred.join(format!("{i:04}.pfm")), &d.scaled(3.0)).unwrap();
    }
    io::write_depth(&gt.join("0009_abs_depth.tif"), &DepthMap::filled(12, 16, 1.0)).unwrap();

    let out = dir.path().join("scaled");
    let stdout = run_ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--median-scale", "--out", s(&out)]).stdout;
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["per_image"].as_array().unwrap().len(), 3);
    assert!(m["mean"]["abs_rel"].as_f64().unwrap() < 1e-6);
    assert_eq!(m["warnings"].as_array().unwrap().len(), 1);
    let table = String::from_utf8(stdout).unwrap();
    assert!(table.contains("Abs Rel"), "{table}");
    assert_eq!(std::fs::read_to_string(out.join("metrics.txt")).unwrap(), table);

    let out = dir.path().join("raw");
    run_ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    let abs_rel = read_json(&out.join("metrics.json"))["mean"]["abs_rel"].as_f64().unwrap();
    assert!((abs_rel - 2.0).abs() < 1e-6, "{abs_rel}");
}

#[test]
fn split_writes_lists_and_summary() {
    let dir = tempdir().unwrap();
    let root = dir.path().join("data");
    for scene in ["a", "b"] {
        let d = root.join(scene);
        std::fs::create_dir_all(&d).unwrap();
        for i in 1..=360 {
            std::fs::write(d.join(format!("{i:05}.png")), b"").unwrap();
        }
    }
    let out = dir.path().join("split");
    run_ok(&["split", "--root", s(&root), "--out", s(&out)]);
    let summary = read_json(&out.join("split.json"));
    assert_eq!((summary["test"].as_u64(), summary["val"].as_u64(), summary["train"].as_u64()), (Some(100), Some(100), Some(20)));
    assert_eq!(std::fs::read_to_string(out.join("test.txt")).unwrap().lines().count(), 100);
}

#[test]
fn rotate_is_deterministic_per_seed() {
    let seq = plane_sequence();
    let args = |out: &Path, seed: &str| {
        run_ok(&[
            "rotate", "--images", s(&seq.root.join("imgs")), "--depths", s(&seq.root.join("depth")), "--gamma", "20",
            "--seed", seed, "--out", s(out),
        ]);
        read_json(&out.join("rotations.json"))
    };
    let a = args(&seq.root.join("r1"), "7");
    let b = args(&seq.root.join("r2"), "7");
    let c = args(&seq.root.join("r3"), "8");
    assert_eq!(a["frames"], b["frames"]);
    assert_ne!(a["frames"], c["frames"]);
    for f in a["frames"].as_array().unwrap() {
        assert!(f["theta"].as_f64().unwrap().abs() <= 20.0);
        let name = f["name"].as_str().unwrap();
        let (r1, r2) = (seq.root.join("r1"), seq.root.join("r2"));
        assert_eq!(std::fs::read(r1.join(format!("{name}.png"))).unwrap(), std::fs::read(r2.join(format!("{name}.png"))).unwrap());
        let depth = io::read_depth(&r1.join(format!("{name}_depth.tif"))).unwrap();
        assert_eq!((depth.height() as u64, depth.width() as u64), (f["height"].as_u64().unwrap(), f["width"].as_u64().unwrap()));
    }
}

#[test]
fn fit_depth_improves_on_its_initialisation() {
    let seq = plane_sequence();
    let poses = seq.root.join("poses.json");
    io::write_poses(&poses, &seq.poses[1..]).unwrap();
    let out = seq.root.join("fit");
    run_ok(&[
        "fit-depth", "--frames", s(&seq.frames[0]), s(&seq.frames[1]), s(&seq.frames[2]), "--poses", s(&poses),
        "--K", s(&seq.camera), "--grid", "4", "--iters", "80", "--init", "3.0", "--gt", s(&seq.depths[0]),
        "--out", s(&out),
    ]);
    let fit = read_json(&out.join("fit.json"));
    let trace: Vec<f64> = fit["trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(trace.last().unwrap() < &trace[0]);
    assert_eq!(fit["degenerate"], false);
    // Constant 3.0 against a plane at 2.0 starts at Abs Rel 0.5.
    assert!(fit["metrics"]["abs_rel"].as_f64().unwrap() < 0.25, "{fit}");
    assert!(out.join("depth.tif").is_file());
}

#[test]
fn failures_exit_nonzero_with_a_json_diagnostic() {
    let seq = plane_sequence();
    let out = seq.root.join("err");
    let poses = seq.root.join("poses.json");
    io::write_poses(&poses, &seq.poses[1..2]).unwrap();
    let res = run(&[
        "losses", "--target", s(&seq.frames[0]), "--sources", s(&seq.frames[1]), s(&seq.frames[2]),
        "--depth", s(&seq.depths[0]), "--poses", s(&poses), "--K", s(&seq.camera), "--out", s(&out),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let diag: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(diag["error"], "parameter");
    assert_eq!(read_json(&out.join("error.json")), diag);

    let out = seq.root.join("missing");
    let res = run(&["eval", "--pred", s(&seq.root.join("nope")), "--gt", s(&seq.root), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(read_json(&out.join("error.json"))["error"], "io");

    let cfg = seq.root.join("cfg.json");
    std::fs::write(&cfg, r#"{"tgam": {"beta": 1.5}}"#).unwrap();
    let res = run(&["manifest", "--config", s(&cfg), "--out", s(&seq.root.join("cfg_out"))]);
    assert_eq!(res.status.code(), Some(1));
    let diag: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(diag["error"], "parameter");
}
