use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aquadepth::config::PipelineConfig;
use aquadepth::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "aquadepth", version, about = "Underwater self-supervised depth pipeline tools")]
struct Cli {
    /// JSON pipeline configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Restore and sharpen images with a per-scene water model.
    Enhance(EnhanceArgs),
    /// Degrade clean images through the image formation model.
    Simulate(SimulateArgs),
    /// Photometric loss maps for a target frame and its sources.
    Losses(LossesArgs),
    /// Anomaly, auto or depth-consistency masks for a list of frames.
    Masks(MasksArgs),
    /// Depth metrics against ground truth.
    Eval(EvalArgs),
    /// Test/val/train lists for a dataset tree.
    Split(SplitArgs),
    /// Random rotation with inscribed crop for image/depth pairs.
    Rotate(RotateArgs),
    /// Fit a depth map directly from frames with known poses.
    FitDepth(FitArgs),
    /// Write the bridge operation manifest.
    Manifest,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub depths: PathBuf,
    /// Water model JSON with `B` and `beta_D`.
    #[arg(long, conflicts_with = "estimate", required_unless_present = "estimate")]
    pub model: Option<PathBuf>,
    /// Estimate the water model from the images themselves.
    #[arg(long)]
    pub estimate: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub depths: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct LossesArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub sources: Vec<PathBuf>,
    /// Target depth map.
    #[arg(long)]
    pub depth: PathBuf,
    /// Target-to-source poses, one 4x4 matrix per source.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long = "K")]
    pub k: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Tgam,
    Am,
    Consistency,
}

#[derive(Args, Debug)]
pub struct MasksArgs {
    #[arg(long, value_enum)]
    pub mode: MaskMode,
    /// JSON list of frames; see the README for the record layout.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long = "K")]
    pub k: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub median_scale: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub root: PathBuf,
}

#[derive(Args, Debug)]
pub struct RotateArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub depths: PathBuf,
    /// Rotation range in degrees; defaults to the configured value.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Target frame followed by one or two source frames.
    #[arg(long, num_args = 2..=3, required = true)]
    pub frames: Vec<PathBuf>,
    /// Target-to-source poses, one per source frame.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long = "K")]
    pub k: PathBuf,
    /// Grid nodes per side; defaults to the configured value.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Constant initial depth.
    #[arg(long, default_value_t = 1.0)]
    pub init: f64,
    /// Ground-truth depth for reporting metrics on the fitted map.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

fn run(cli: Cli) -> aquadepth::Result<()> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Enhance(a) => commands::enhance(&a, &cfg, out),
        Command::Simulate(a) => commands::simulate(&a, out),
        Command::Losses(a) => commands::losses(&a, &cfg, out),
        Command::Masks(a) => commands::masks(&a, &cfg, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Split(a) => commands::split(&a, out),
        Command::Rotate(a) => commands::rotate(&a, &cfg, out),
        Command::FitDepth(a) => commands::fit_depth(&a, &cfg, out),
        Command::Manifest => aquadepth::io::write_json(&out.join("manifest.json"), &aquadepth::bridge::manifest_json()),
    }
}

fn report_error(err: &Error, out: &Path) {
    let diag = err.to_json();
    eprintln!("{diag}");
    if out.is_dir() {
        let _ = aquadepth::io::write_json(&out.join("error.json"), &diag);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report_error(&err, &out);
            ExitCode::FAILURE
        }
    }
}
