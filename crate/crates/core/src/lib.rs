//! Curriculum-augmented, RND-coupled PPO for daily crop management.

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod noise;
pub mod policy;
pub mod ppo;
pub mod protocol;
pub mod rnd;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use env::{ActionChoice, CropState, Environment, RewardWeights, ScenarioConfig, SurrogateEnv};
pub use error::{Error, Result};
pub use nn::{AdamState, Mlp};
pub use policy::{FixedManagement, Policy};
pub use ppo::PolicyNet;
pub use trainer::RunConfig;
