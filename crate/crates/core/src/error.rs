use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlockError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlockError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config file {path}: {reason}")]
    ConfigFile { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint layer `{layer}` does not match config: {reason}")]
    TopologyMismatch { layer: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("airspeed must be non-zero to evaluate the turn rate")]
    ZeroAirspeed,

    #[error("{name} action {value} outside [{lo}, {hi}]")]
    ActionOutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("could not place follower {index} after {tries} tries; spawn annulus too crowded")]
    SpawnFailed { index: usize, tries: usize },

    #[error("scripted leader needs at least one waypoint")]
    EmptyWaypoints,

    #[error("missing log entries: expected {expected}, found {found}")]
    MissingEntries { expected: usize, found: usize },

    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: u64, reason: String },

    #[error("training diverged at episode {episode}: {reason}")]
    Diverged { episode: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FlockError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FlockError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
