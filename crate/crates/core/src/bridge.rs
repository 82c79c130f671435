//! Buffer-level dispatch for foreign callers.
//!
//! Scripting front ends hand over contiguous `f32` buffers shaped
//! `(height, width, channels)` plus a JSON object of parameters, and receive
//! buffers and JSON back. [`MANIFEST`] lists every exported operation; the
//! same table drives [`call`] and [`manifest_json`].
//!
//! Conventions for buffers:
//! * images: `C = 3` (or 1), values in `[0, 1]`;
//! * depth maps and loss maps: `C = 1`, NaN marks a hole or invalid pixel;
//! * masks: `C = 1`, `1.0` kept and `0.0` dropped.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::camera::{Intrinsics, Pose};
use crate::enhance::{self, SharpenConfig, WaterModel};
use crate::error::{param, Error, Result};
use crate::eval;
use crate::imaging::{DepthMap, Image, Mask};
use crate::losses::{self, LossConfig, LossMap};
use crate::masking::{self, TgamState};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpSpec {
    pub name: &'static str,
    pub inputs: &'static [&'static str],
    pub params: &'static [&'static str],
    pub outputs: &'static [&'static str],
}

const fn op(
    name: &'static str,
    inputs: &'static [&'static str],
    params: &'static [&'static str],
    outputs: &'static [&'static str],
) -> OpSpec {
    OpSpec { name, inputs, params, outputs }
}

pub const MANIFEST: &[OpSpec] = &[
    op("noop", &["buffer"], &[], &["buffer"]),
    op("enhance", &["image", "depth"], &["model", "sharpen?"], &["image"]),
    op("restore", &["image", "depth"], &["model"], &["image"]),
    op("degrade", &["image", "depth"], &["model"], &["image"]),
    op("photometric_error", &["image", "image"], &["loss?"], &["loss_map"]),
    op("min_reprojection_loss", &["target", "warp, mask..."], &["loss?"], &["loss_map"]),
    op("pearson_loss", &["depth", "depth"], &[], &["json:value"]),
    op("tgam_update", &["loss_map"], &["state"], &["json:state,threshold"]),
    op("tgam_mask", &["loss_map"], &["threshold"], &["mask"]),
    op("consistency_mask", &["depth", "depth"], &["pose", "K", "tau?"], &["mask"]),
    op("depth_metrics", &["depth", "depth"], &[], &["json:report"]),
    op("median_scale", &["depth", "depth"], &[], &["depth"]),
];

/// Versioned manifest for front ends to generate their bindings from.
pub fn manifest_json() -> Value {
    json!({ "version": MANIFEST_VERSION, "ops": MANIFEST })
}

/// Contiguous row-major `f32` buffer of shape `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferView {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl BufferView {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return param(format!("buffer shape {shape:?} has a zero dimension"));
        }
        if data.len() != shape.iter().product::<usize>() {
            return param(format!("buffer of {} elements does not match shape {shape:?}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Element strides for the three axes.
    pub fn strides(&self) -> [usize; 3] {
        [self.shape[1] * self.shape[2], self.shape[2], 1]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            shape: [img.height(), img.width(), img.channels()],
            data: img.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_depth(d: &DepthMap) -> Self {
        let data = d.depth().iter().zip(d.valid()).map(|(&v, &ok)| if ok { v as f32 } else { f32::NAN }).collect();
        Self { shape: [d.height(), d.width(), 1], data }
    }

    pub fn from_loss_map(m: &LossMap) -> Self {
        let data = m.value.iter().zip(&m.valid).map(|(&v, &ok)| if ok { v as f32 } else { f32::NAN }).collect();
        Self { shape: [m.height, m.width, 1], data }
    }

    pub fn from_mask(m: &Mask) -> Self {
        let data = m.keep().iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Self { shape: [m.height(), m.width(), 1], data }
    }

    fn single_channel(&self, what: &str) -> Result<()> {
        if self.shape[2] != 1 {
            return param(format!("{what} buffer must have one channel, got shape {:?}", self.shape));
        }
        Ok(())
    }

    pub fn to_image(&self) -> Result<Image> {
        Image::new(self.shape[0], self.shape[1], self.shape[2], self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        self.single_channel("depth")?;
        DepthMap::from_raw(self.shape[0], self.shape[1], self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_loss_map(&self) -> Result<LossMap> {
        self.single_channel("loss map")?;
        let valid: Vec<bool> = self.data.iter().map(|v| v.is_finite()).collect();
        let value = self.data.iter().map(|&v| if v.is_finite() { f64::from(v) } else { 0.0 }).collect();
        LossMap::new(self.shape[0], self.shape[1], value, valid)
    }

    pub fn to_mask(&self) -> Result<Mask> {
        self.single_channel("mask")?;
        Mask::new(self.shape[0], self.shape[1], self.data.iter().map(|&v| v != 0.0).collect())
    }
}

/// Buffers and JSON returned by one [`call`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BridgeOutput {
    pub buffers: Vec<BufferView>,
    pub json: Value,
}

impl BridgeOutput {
    fn buffer(b: BufferView) -> Self {
        Self { buffers: vec![b], json: Value::Null }
    }

    fn json(v: Value) -> Self {
        Self { buffers: Vec::new(), json: v }
    }
}

fn field<T: for<'de> Deserialize<'de>>(params: &Value, key: &str) -> Result<T> {
    match params.get(key) {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Parameter(format!("parameter {key}: {e}"))),
        None => param(format!("missing parameter {key}")),
    }
}

fn field_or<T: for<'de> Deserialize<'de>>(params: &Value, key: &str, default: T) -> Result<T> {
    if params.get(key).is_some() {
        field(params, key)
    } else {
        Ok(default)
    }
}

fn arity(name: &str, inputs: &[BufferView], n: usize) -> Result<()> {
    if inputs.len() != n {
        return param(format!("{name} takes {n} buffers, got {}", inputs.len()));
    }
    Ok(())
}

fn spec(name: &str) -> Option<&'static OpSpec> {
    MANIFEST.iter().find(|o| o.name == name)
}

/// Runs the exported operation `name`.
///
/// Results equal the native function applied to the same values, cast to
/// `f32`. Native errors are returned unchanged; their [`Error::to_json`] is
/// the diagnostic a front end should attach to its exception.
pub fn call(name: &str, inputs: &[BufferView], params: &Value) -> Result<BridgeOutput> {
    let Some(spec) = spec(name) else {
        return param(format!("unknown bridge operation {name:?}"));
    };
    if !spec.inputs.iter().any(|i| i.ends_with("...")) {
        arity(name, inputs, spec.inputs.len())?;
    }
    let loss_cfg = || field_or(params, "loss", LossConfig::default());
    match spec.name {
        "noop" => Ok(BridgeOutput::buffer(inputs[0].clone())),
        "enhance" | "restore" | "degrade" => {
            let img = inputs[0].to_image()?;
            let depth = inputs[1].to_depth()?;
            let model: WaterModel = field(params, "model")?;
            let out = match spec.name {
                "enhance" => enhance::enhance(&img, &depth, &model, &field_or(params, "sharpen", SharpenConfig::default())?)?,
                "restore" => enhance::restore(&img, &depth, &model)?,
                _ => enhance::degrade(&img, &depth, &model)?,
            };
            Ok(BridgeOutput::buffer(BufferView::from_image(&out)))
        }
        "photometric_error" => {
            let pe = losses::photometric_error(&inputs[0].to_image()?, &inputs[1].to_image()?, &loss_cfg()?)?;
            Ok(BridgeOutput::buffer(BufferView::from_loss_map(&pe)))
        }
        "min_reprojection_loss" => {
            if inputs.len() < 3 || inputs.len() % 2 == 0 {
                return param("min_reprojection_loss takes a target followed by (warp, mask) pairs");
            }
            let target = inputs[0].to_image()?;
            let warps = inputs[1..]
                .chunks_exact(2)
                .map(|p| Ok((p[0].to_image()?, p[1].to_mask()?)))
                .collect::<Result<Vec<_>>>()?;
            let map = losses::min_reprojection_loss(&target, &warps, &loss_cfg()?)?;
            Ok(BridgeOutput::buffer(BufferView::from_loss_map(&map)))
        }
        "pearson_loss" => {
            let v = losses::pearson_loss(&inputs[0].to_depth()?, &inputs[1].to_depth()?)?;
            Ok(BridgeOutput::json(json!({ "value": v })))
        }
        "tgam_update" => {
            let state: TgamState = field(params, "state")?;
            let (next, threshold) = masking::tgam_update(&state, &inputs[0].to_loss_map()?)?;
            Ok(BridgeOutput::json(json!({ "state": next, "threshold": threshold })))
        }
        "tgam_mask" => {
            let threshold: f64 = field(params, "threshold")?;
            let m = masking::tgam_mask(&inputs[0].to_loss_map()?, threshold)?;
            Ok(BridgeOutput::buffer(BufferView::from_mask(&m)))
        }
        "consistency_mask" => {
            let rows: [[f64; 4]; 4] = field(params, "pose")?;
            let k: Intrinsics = field(params, "K")?;
            let tau: f64 = field_or(params, "tau", 0.03)?;
            let m = masking::consistency_mask(&inputs[0].to_depth()?, &inputs[1].to_depth()?, &Pose::from_rows(&rows)?, &k, tau)?;
            Ok(BridgeOutput::buffer(BufferView::from_mask(&m)))
        }
        "depth_metrics" => {
            let r = eval::depth_metrics(&inputs[0].to_depth()?, &inputs[1].to_depth()?)?;
            Ok(BridgeOutput::json(json!(r)))
        }
        "median_scale" => {
            let d = eval::median_scale(&inputs[0].to_depth()?, &inputs[1].to_depth()?)?;
            Ok(BridgeOutput::buffer(BufferView::from_depth(&d)))
        }
        other => unreachable!("manifest entry {other} has no dispatch arm"),
    }
}
