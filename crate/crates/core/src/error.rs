use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: length mismatch, expected {expected}, got {actual}")]
    Length {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible layout: target content fraction {target:.3}, achieved {achieved:.3}")]
    InfeasibleLayout { target: f64, achieved: f64 },

    #[error("document has no content regions")]
    EmptyDocument,

    #[error("oracle detector requires ground-truth patch labels")]
    MissingLabels,

    #[error("image side {side} is not divisible by patch size {patch}")]
    Indivisible { side: usize, patch: usize },

    #[error("grid {rows}x{cols} has an odd side and cannot be merged")]
    OddGrid { rows: usize, cols: usize },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than by a failure
    /// during computation or I/O.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Indivisible { .. }
                | Error::OddGrid { .. }
                | Error::InfeasibleLayout { .. }
                | Error::MissingLabels
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
