//! Scene directory scanning and the fixed test/val/train split.
//!
//! Expected tree, one directory per scene:
//!
//! ```text
//! root/
//!   scene_a/
//!     imgs/   (or images/)   0001.png, 0002.png, ...
//!     depth/  (or depths/)   0001_abs_depth.tif, ...
//!   scene_b/
//!     0001.tiff  0001_SeaErra_abs_depth.tif  ...   (flat layout)
//! ```
//!
//! Images and depth maps pair by file stem after removing a known depth
//! suffix (`_SeaErra_abs_depth`, `_abs_depth`, `_depth`).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{param, Result};

const IMAGE_DIRS: [&str; 2] = ["imgs", "images"];
const DEPTH_DIRS: [&str; 2] = ["depth", "depths"];
const DEPTH_SUFFIXES: [&str; 3] = ["_SeaErra_abs_depth", "_abs_depth", "_depth"];
const IMAGE_EXTS: [&str; 3] = ["png", "tif", "tiff"];
const DEPTH_EXTS: [&str; 3] = ["tif", "tiff", "pfm"];

/// Frames per scene reserved for test candidates.
pub const TEST_BLOCK: usize = 300;
/// Frames per scene reserved for validation, following the test block.
pub const VAL_BLOCK: usize = 50;
/// Test sampling stride inside the test block.
pub const TEST_STRIDE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
    pub scene: String,
    /// 1-based position in filename order.
    pub index: usize,
    pub basename: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub scenes: Vec<Scene>,
    pub warnings: Vec<String>,
}

fn ext_of(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_owned()
}

/// Frame stem a depth file belongs to, if its name carries a depth suffix.
pub fn depth_key(stem: &str) -> Option<&str> {
    DEPTH_SUFFIXES.iter().find_map(|s| stem.strip_suffix(s))
}

fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn first_existing(scene: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| scene.join(n)).find(|p| p.is_dir())
}

/// Pairs the images in `image_dir` with depth maps in `depth_dir` by stem.
///
/// When both directories are the same, files carrying a depth suffix are
/// treated as depth maps and everything else as images. Missing and
/// orphaned depth files are reported in `warnings`.
pub fn pair_directory(image_dir: &Path, depth_dir: &Path, scene: &str, warnings: &mut Vec<String>) -> Result<Vec<Frame>> {
    let shared = image_dir == depth_dir;
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut depths: BTreeMap<String, PathBuf> = BTreeMap::new();

    for path in files_in(image_dir)? {
        let stem = stem_of(&path);
        if IMAGE_EXTS.contains(&ext_of(&path).as_str()) && !(shared && depth_key(&stem).is_some()) {
            images.insert(stem, path);
        }
    }
    for path in files_in(depth_dir)? {
        if !DEPTH_EXTS.contains(&ext_of(&path).as_str()) {
            continue;
        }
        let stem = stem_of(&path);
        match depth_key(&stem) {
            Some(key) => {
                depths.insert(key.to_owned(), path);
            }
            None if !shared => {
                depths.insert(stem, path);
            }
            None => {}
        }
    }

    let mut frames = Vec::with_capacity(images.len());
    for (i, (stem, image)) in images.into_iter().enumerate() {
        let depth = depths.remove(&stem);
        if depth.is_none() {
            warnings.push(format!("{scene}/{stem}: no depth map"));
        }
        frames.push(Frame { image, depth, scene: scene.to_owned(), index: i + 1, basename: stem });
    }
    for (stem, path) in depths {
        warnings.push(format!("{scene}: depth file {} has no matching image {stem}", path.display()));
    }
    Ok(frames)
}

fn scan_scene(dir: &Path, id: &str, warnings: &mut Vec<String>) -> Result<Scene> {
    let image_dir = first_existing(dir, &IMAGE_DIRS).unwrap_or_else(|| dir.to_path_buf());
    let depth_dir = first_existing(dir, &DEPTH_DIRS).unwrap_or_else(|| dir.to_path_buf());
    let frames = pair_directory(&image_dir, &depth_dir, id, warnings)?;
    Ok(Scene { id: id.to_owned(), frames })
}

/// Lists every scene subdirectory of `root` with its frames in filename order.
pub fn scan_scenes(root: &Path) -> Result<ScanReport> {
    let mut report = ScanReport::default();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    for dir in dirs {
        let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        let scene = scan_scene(&dir, &id, &mut report.warnings)?;
        report.scenes.push(scene);
    }
    Ok(report)
}

/// Reference to one frame of one scene.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub scene: String,
    pub index: usize,
    pub basename: String,
}

impl From<&Frame> for FrameRef {
    fn from(f: &Frame) -> Self {
        FrameRef { scene: f.scene.clone(), index: f.index, basename: f.basename.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<FrameRef>,
    pub val: Vec<FrameRef>,
    pub test: Vec<FrameRef>,
    pub warnings: Vec<String>,
}

/// Per scene: every sixth of the first 300 frames (1, 7, 13, ...) is test,
/// frames 301 to 350 are validation and the rest train. Test candidates not
/// sampled are left out. Scenes shorter than 351 frames go entirely to train.
pub fn generate_ouc_split(scenes: &[Scene]) -> Split {
    let mut split = Split::default();
    let min_len = TEST_BLOCK + VAL_BLOCK + 1;
    for scene in scenes {
        if scene.frames.len() < min_len {
            split.warnings.push(format!(
                "scene {} has {} frames (< {min_len}); all assigned to train",
                scene.id,
                scene.frames.len()
            ));
            split.train.extend(scene.frames.iter().map(FrameRef::from));
            continue;
        }
        for f in &scene.frames {
            let r = FrameRef::from(f);
            if f.index <= TEST_BLOCK {
                if (f.index - 1) % TEST_STRIDE == 0 {
                    split.test.push(r);
                }
            } else if f.index <= TEST_BLOCK + VAL_BLOCK {
                split.val.push(r);
            } else {
                split.train.push(r);
            }
        }
    }
    split
}

/// Frames of `part` whose previous and next frames are in `part` too.
pub fn eligible_triplets(part: &[FrameRef]) -> Vec<FrameRef> {
    let members: HashSet<(&str, usize)> = part.iter().map(|f| (f.scene.as_str(), f.index)).collect();
    part.iter()
        .filter(|f| {
            f.index > 1
                && members.contains(&(f.scene.as_str(), f.index - 1))
                && members.contains(&(f.scene.as_str(), f.index + 1))
        })
        .cloned()
        .collect()
}

fn list_text(frames: &[FrameRef]) -> String {
    let mut s = String::new();
    for f in frames {
        let _ = writeln!(s, "{} {}", f.scene, f.basename);
    }
    s
}

/// Writes `train.txt`, `val.txt` and `test.txt` into `dir`.
pub fn write_split(dir: &Path, split: &Split) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return param(format!("{} is not a directory", dir.display()));
    }
    std::fs::create_dir_all(dir)?;
    for (name, part) in [("train.txt", &split.train), ("val.txt", &split.val), ("test.txt", &split.test)] {
        std::fs::write(dir.join(name), list_text(part))?;
    }
    Ok(())
}
