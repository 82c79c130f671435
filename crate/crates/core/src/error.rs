use thiserror::Error;

/// Errors raised by the pipeline.
///
/// Every variant carries a human-readable message; [`Error::kind`] gives a
/// stable identifier used in machine-readable diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation precondition (shape, range, emptiness).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A rotation/crop combination has no valid output rectangle.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Scene-model estimation could not be carried out.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Input is well-formed but carries no usable signal (zero variance, zero median).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Depth fitting could not make progress.
    #[error("optimization error: {message}")]
    Optimization { message: String, trace: Vec<f64> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Unsupported or malformed file content.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Geometry(_) => "geometry",
            Error::Estimation(_) => "estimation",
            Error::Degenerate(_) => "degenerate",
            Error::Optimization { .. } => "optimization",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
        }
    }

    /// Machine-readable diagnostic record.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        if let Error::Optimization { trace, .. } = self {
            v["trace"] = serde_json::json!(trace);
        }
        v
    }
}

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

pub type Result<T> = std::result::Result<T, Error>;
