//! Self-supervised underwater depth pipeline: view-synthesis losses,
//! anomaly and consistency masking, image-formation based enhancement,
//! rotation geometry for distillation, and depth evaluation.

pub mod bridge;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod fit;
pub mod imaging;
pub mod io;
pub mod losses;
pub mod masking;
pub mod synth;

pub use error::{Error, Result};
