//! File formats: PNG and float TIFF images, TIFF and PFM depth maps, mask
//! PNGs, and the JSON camera, pose and water-model files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use crate::camera::{Intrinsics, Pose};
use crate::enhance::WaterModel;
use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image, Mask};
use crate::losses::LossMap;

fn format_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn is_tiff(path: &Path) -> bool {
    matches!(extension(path).as_str(), "tif" | "tiff")
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => format_err(path, other),
    }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::IoError(io) => Error::Io(io),
        other => format_err(path, other),
    }
}

/// Bit depth used when writing PNG files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PngDepth {
    #[default]
    Eight,
    Sixteen,
}

/// Reads a PNG (8 or 16 bit) or TIFF image into `[0, 1]` floats.
///
/// PNGs are always returned as RGB. TIFFs keep one channel if they are
/// grayscale; alpha is discarded.
pub fn read_image(path: &Path) -> Result<Image> {
    if is_tiff(path) {
        return read_tiff_image(path);
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            img.to_rgb16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()
        }
        _ => img.to_rgb32f().into_raw().into_iter().map(f64::from).collect(),
    };
    Image::new(h, w, 3, data)
}

struct RawTiff {
    width: usize,
    height: usize,
    samples: usize,
    data: Vec<f64>,
}

fn read_tiff_raw(path: &Path, normalize_ints: bool) -> Result<RawTiff> {
    let file = BufReader::new(File::open(path)?);
    let mut dec = Decoder::new(file).map_err(|e| tiff_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let samples = match dec.colortype().map_err(|e| tiff_err(path, e))? {
        ColorType::Gray(_) => 1,
        ColorType::GrayA(_) => 2,
        ColorType::RGB(_) => 3,
        ColorType::RGBA(_) => 4,
        other => return Err(format_err(path, format!("unsupported TIFF color type {other:?}"))),
    };
    let scale = |max: f64| if normalize_ints { 1.0 / max } else { 1.0 };
    let data: Vec<f64> = match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::U8(v) => v.into_iter().map(|x| f64::from(x) * scale(255.0)).collect(),
        DecodingResult::U16(v) => v.into_iter().map(|x| f64::from(x) * scale(65535.0)).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| f64::from(x) * scale(u32::MAX as f64)).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        _ => return Err(format_err(path, "unsupported TIFF sample format")),
    };
    let (width, height) = (w as usize, h as usize);
    if data.len() != width * height * samples {
        return Err(format_err(path, "TIFF sample count does not match its dimensions"));
    }
    Ok(RawTiff { width, height, samples, data })
}

fn read_tiff_image(path: &Path) -> Result<Image> {
    let raw = read_tiff_raw(path, true)?;
    let channels = if raw.samples >= 3 { 3 } else { 1 };
    let data = if channels == raw.samples {
        raw.data
    } else {
        raw.data.chunks_exact(raw.samples).flat_map(|px| px[..channels].to_vec()).collect()
    };
    Image::new(raw.height, raw.width, channels, data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes an image as PNG, quantizing `[0, 1]` to the chosen bit depth.
pub fn write_png(path: &Path, img: &Image, depth: PngDepth) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = match (img.channels(), depth) {
        (1, PngDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| to_u8(v)).collect()).expect("buffer sized from image"),
        ),
        (1, PngDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| to_u16(v)).collect()).expect("buffer sized from image"),
        ),
        (_, PngDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| to_u8(v)).collect()).expect("buffer sized from image"),
        ),
        (_, PngDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| to_u16(v)).collect()).expect("buffer sized from image"),
        ),
    };
    dynamic.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

fn write_tiff_f32(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut enc = TiffEncoder::new(&mut out).map_err(|e| tiff_err(path, e))?;
    let (w, h) = (width as u32, height as u32);
    let written = if channels == 3 {
        enc.write_image::<colortype::RGB32Float>(w, h, data)
    } else {
        enc.write_image::<colortype::Gray32Float>(w, h, data)
    };
    written.map_err(|e| tiff_err(path, e))?;
    out.flush()?;
    Ok(())
}

/// Writes an image as a 32-bit float TIFF without quantization.
pub fn write_tiff_image(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<f32> = img.data().iter().map(|&v| v as f32).collect();
    write_tiff_f32(path, img.width(), img.height(), img.channels(), &data)
}

/// Writes by extension: `.tif`/`.tiff` as float TIFF, anything else as 8-bit PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if is_tiff(path) {
        write_tiff_image(path, img)
    } else {
        write_png(path, img, PngDepth::Eight)
    }
}

/// Reads a depth map from a single-channel TIFF or a PFM file. NaN, infinite
/// and non-positive values become holes.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    if extension(path) == "pfm" {
        return read_pfm(path);
    }
    let raw = read_tiff_raw(path, false)?;
    if raw.samples != 1 {
        return Err(format_err(path, format!("depth TIFF must have one channel, found {}", raw.samples)));
    }
    DepthMap::from_raw(raw.height, raw.width, raw.data)
}

fn depth_as_f32(depth: &DepthMap) -> Vec<f32> {
    depth.depth().iter().zip(depth.valid()).map(|(&d, &ok)| if ok { d as f32 } else { f32::NAN }).collect()
}

/// Writes a depth map by extension (`.pfm` or float TIFF), holes as NaN.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    if extension(path) == "pfm" {
        return write_pfm(path, depth);
    }
    write_tiff_f32(path, depth.width(), depth.height(), 1, &depth_as_f32(depth))
}

/// Writes a loss map as a float TIFF, invalid pixels as NaN.
pub fn write_loss_map(path: &Path, map: &LossMap) -> Result<()> {
    let data: Vec<f32> = map.value.iter().zip(&map.valid).map(|(&v, &ok)| if ok { v as f32 } else { f32::NAN }).collect();
    write_tiff_f32(path, map.width, map.height, 1, &data)
}

fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(format_err(path, "truncated PFM header"));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format_err(path, format!("bad PFM magic {other:?}"))),
    };
    if channels != 1 {
        return Err(format_err(path, "depth PFM must be single channel (Pf)"));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| format_err(path, format!("bad PFM header field {s:?}")));
    let (w, h, scale) = (parse(&header[1])? as usize, parse(&header[2])? as usize, parse(&header[3])?);
    let little = scale < 0.0;
    let mut bytes = vec![0u8; w * h * 4];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; w * h];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = f64::from(v);
    }
    DepthMap::from_raw(h, w, data)
}

fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    let values = depth_as_f32(depth);
    for row in (0..h).rev() {
        for v in &values[row * w..(row + 1) * w] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes a mask as a one-channel PNG, 255 for kept pixels and 0 otherwise.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.keep().iter().map(|&k| if k { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("buffer sized from mask");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Reads a mask PNG; any value above half scale counts as kept.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let keep = img.as_raw().iter().map(|&v| v > 127).collect();
    Mask::new(img.height() as usize, img.width() as usize, keep)
}

/// Camera calibration file: intrinsics plus the image size they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraFile {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<CameraFile> {
    let cam: CameraFile = read_json(path)?;
    cam.intrinsics()?;
    Ok(cam)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PoseFile {
    One([[f64; 4]; 4]),
    Many(Vec<[[f64; 4]; 4]>),
}

/// Reads one 4×4 row-major matrix or a list of them.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let rows = match read_json::<PoseFile>(path)? {
        PoseFile::One(m) => vec![m],
        PoseFile::Many(ms) => ms,
    };
    rows.iter().map(Pose::from_rows).collect()
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let rows: Vec<[[f64; 4]; 4]> = poses.iter().map(Pose::to_rows).collect();
    write_json(path, &rows)
}

pub fn read_water_model(path: &Path) -> Result<WaterModel> {
    let model: WaterModel = read_json(path)?;
    model.validate()?;
    Ok(model)
}

pub fn write_water_model(path: &Path, model: &WaterModel) -> Result<()> {
    write_json(path, model)
}
