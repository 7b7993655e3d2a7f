use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A state became NaN or infinite during time stepping.
    #[error("simulation diverged at t = {time}{}", particle_suffix(.particle))]
    SimulationDiverged { time: f64, particle: Option<usize> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precision operator unavailable: {0}")]
    PrecisionUnavailable(String),

    /// Every bridge in a batch received zero weight.
    #[error("degenerate bridge batch: all Girsanov weights vanished")]
    DegenerateBatch,

    #[error("filter degenerate at observation {obs_index}: all likelihoods vanished")]
    FilterDegenerate { obs_index: usize },

    #[error("window {window} is not stored in the filter history")]
    MissingHistory { window: usize },

    #[error("smoother failed on window {window}: every pair was degenerate")]
    SmootherFailed { window: usize },

    #[error("degenerate precision: sample matrix has no usable singular values")]
    DegeneratePrecision,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn particle_suffix(particle: &Option<usize>) -> String {
    match particle {
        Some(i) => format!(" (particle {i})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Attach a particle index to a divergence error.
    pub fn with_particle(self, index: usize) -> Self {
        match self {
            Error::SimulationDiverged { time, .. } => Error::SimulationDiverged {
                time,
                particle: Some(index),
            },
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SimulationDiverged { .. }
                | Error::PrecisionUnavailable(_)
                | Error::DegenerateBatch
                | Error::FilterDegenerate { .. }
                | Error::SmootherFailed { .. }
                | Error::DegeneratePrecision
        )
    }
}
