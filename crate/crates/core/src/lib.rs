//! Leader–follower flocking of fixed-wing UAVs: kinematic simulator, flocking MDP,
//! permutation-invariant policy networks and a parameter-shared actor-critic trainer.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the CLI uses.

pub mod checkpoint;
pub mod config;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod networks;
pub mod nn;
pub mod plot;
pub mod scalar;
pub mod trainer;
pub mod trajectory;

pub use config::RunConfig;
pub use error::{FlockError, Result};

pub type UavState = kinematics::UavState<f64>;
pub type Action = environment::Action<f64>;
pub type Observation = environment::Observation<f64>;
pub type FlockEnv = environment::FlockEnv<f64>;
pub type PolicyNet = networks::PolicyNet<f64>;
pub type PolicyNetworks = networks::PolicyNetworks<f64>;
pub type Experience = trainer::Experience<f64>;
pub type ReplayMemory = trainer::ReplayMemory<f64>;
pub type Trainer = trainer::Trainer<f64>;
pub type EpisodeLog = evaluation::EpisodeLog<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
