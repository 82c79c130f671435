use std::path::Path;

use aquadepth::dataset::{generate_ouc_split, scan_scenes, write_split};
use aquadepth::imaging::{DepthMap, Image};
use aquadepth::io;
use tempfile::tempdir;

fn put_frame(image_dir: &Path, depth_dir: &Path, stem: &str, depth_suffix: &str) {
    std::fs::create_dir_all(image_dir).unwrap();
    std::fs::create_dir_all(depth_dir).unwrap();
    io::write_image(&image_dir.join(format!("{stem}.png")), &Image::filled(4, 5, 3, 0.5)).unwrap();
    if !depth_suffix.is_empty() {
        io::write_depth(&depth_dir.join(format!("{stem}{depth_suffix}.tif")), &DepthMap::filled(4, 5, 2.0)).unwrap();
    }
}

#[test]
fn empty_root_has_no_scenes() {
    let dir = tempdir().unwrap();
    let report = scan_scenes(dir.path()).unwrap();
    assert!(report.scenes.is_empty());
    assert!(report.warnings.is_empty());
}

#[test]
fn missing_root_is_an_io_error() {
    let dir = tempdir().unwrap();
    assert!(matches!(scan_scenes(&dir.path().join("absent")), Err(aquadepth::Error::Io(_))));
}

#[test]
fn two_scenes_with_split_subdirectories() {
    let dir = tempdir().unwrap();
    for scene in ["reef", "wreck"] {
        let root = dir.path().join(scene);
        for i in 1..=10 {
            put_frame(&root.join("imgs"), &root.join("depth"), &format!("{i:04}"), "_abs_depth");
        }
    }
    let report = scan_scenes(dir.path()).unwrap();
    assert_eq!(report.scenes.len(), 2);
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    for (scene, id) in report.scenes.iter().zip(["reef", "wreck"]) {
        assert_eq!(scene.id, id);
        assert_eq!(scene.frames.len(), 10);
        for (i, f) in scene.frames.iter().enumerate() {
            assert_eq!(f.index, i + 1);
            assert_eq!(f.basename, format!("{:04}", i + 1));
            let depth = f.depth.as_ref().unwrap();
            assert!(depth.ends_with(format!("depth/{:04}_abs_depth.tif", i + 1)));
        }
    }
}

#[test]
fn missing_and_orphaned_depth_are_warned_about() {
    let dir = tempdir().unwrap();
    let root = dir.path().join("s");
    put_frame(&root.join("images"), &root.join("depths"), "0001", "_depth");
    put_frame(&root.join("images"), &root.join("depths"), "0002", "");
    io::write_depth(&root.join("depths").join("0009_depth.tif"), &DepthMap::filled(4, 5, 1.0)).unwrap();

    let report = scan_scenes(dir.path()).unwrap();
    let frames = &report.scenes[0].frames;
    assert_eq!(frames.len(), 2);
    assert!(frames[0].depth.is_some());
    assert!(frames[1].depth.is_none());
    assert_eq!(report.warnings.len(), 2, "{:?}", report.warnings);
    assert!(report.warnings.iter().any(|w| w.contains("0002")));
    assert!(report.warnings.iter().any(|w| w.contains("0009")));
}

#[test]
fn flat_layout_separates_images_from_depth_by_suffix() {
    let dir = tempdir().unwrap();
    let root = dir.path().join("flat");
    for i in 1..=4 {
        put_frame(&root, &root, &format!("{i:04}"), "_SeaErra_abs_depth");
    }
    std::fs::write(root.join("notes.txt"), "ignored").unwrap();
    let report = scan_scenes(dir.path()).unwrap();
    let frames = &report.scenes[0].frames;
    assert_eq!(frames.len(), 4);
    assert!(frames.iter().all(|f| f.depth.is_some()));
    assert!(report.warnings.is_empty());
}

#[test]
fn split_files_list_scene_and_frame() {
    let dir = tempdir().unwrap();
    let root = dir.path().join("data");
    let scene = root.join("a");
    std::fs::create_dir_all(&scene).unwrap();
    // Empty files are enough for scanning; only names matter.
    for i in 1..=352 {
        std::fs::write(scene.join(format!("{i:05}.png")), b"").unwrap();
    }
    let report = scan_scenes(&root).unwrap();
    let split = generate_ouc_split(&report.scenes);
    assert_eq!((split.test.len(), split.val.len(), split.train.len()), (50, 50, 2));

    let out = dir.path().join("lists");
    write_split(&out, &split).unwrap();
    let test = std::fs::read_to_string(out.join("test.txt")).unwrap();
    assert_eq!(test.lines().next(), Some("a 00001"));
    assert_eq!(test.lines().nth(1), Some("a 00007"));
    assert_eq!(std::fs::read_to_string(out.join("train.txt")).unwrap(), "a 00351\na 00352\n");
    assert_eq!(std::fs::read_to_string(out.join("val.txt")).unwrap().lines().count(), 50);
}
