//! Run configuration: one TOML file with a section per subsystem.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [kinematics]
//! dt = 0.1
//!
//! [trainer]
//! episodes = 3000
//!
//! [network.embedding]
//! variant = "cnnmp"
//! ```
//!
//! Every key is optional and defaults to the values in [`RunConfig::default`];
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::environment::{EnvConfig, FlockConfig, RewardConfig};
use crate::error::{FlockError, Result};
use crate::evaluation::EvalConfig;
use crate::kinematics::{DisturbanceConfig, KinematicsConfig};
use crate::networks::NetworkConfig;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub kinematics: KinematicsConfig,
    pub disturbance: DisturbanceConfig,
    pub reward: RewardConfig,
    pub flock: FlockConfig,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            kinematics: KinematicsConfig::default(),
            disturbance: DisturbanceConfig::default(),
            reward: RewardConfig::default(),
            flock: FlockConfig::default(),
            network: NetworkConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            kinematics: self.kinematics.clone(),
            disturbance: self.disturbance.clone(),
            reward: self.reward.clone(),
            flock: self.flock.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env().validate()?;
        self.network.validate()?;
        self.trainer.validate()?;
        self.eval.validate()
    }

    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FlockError::config(describe_span(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlockError::config("<serialize>", e.to_string()))
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlockError::ConfigFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            FlockError::Config { field, reason } => FlockError::ConfigFile {
                path: path.to_path_buf(),
                reason: format!("{field}: {reason}"),
            },
            other => other,
        })
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(digest_text(&self.to_toml_string()?))
    }
}

pub(crate) fn digest_text(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

fn describe_span(e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => format!("bytes {}..{}", span.start, span.end),
        None => "<document>".to_string(),
    }
}

/// Convenience: a config whose environment always has exactly `n` followers.
pub fn with_fixed_squad(mut cfg: RunConfig, n: usize) -> RunConfig {
    cfg.flock.n_min = n;
    cfg.flock.n_max = n;
    cfg
}
