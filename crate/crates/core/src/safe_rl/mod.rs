//! Off-policy safe reinforcement learning with optional optimal-transport
//! perturbations of the sampled next states.

mod agent;
mod buffer;
mod config;
mod train;

pub use agent::{
    bellman_targets, constraint_samples, critic_update, estimate_constraint, lagrange_dual_step, normal_noise,
    policy_update_crpo, policy_update_lagrange, Agent, Branch, CriticLosses, CriticPair, Perturbations,
    PolicyStep, PolicyValue, SignalKind, UpdateLog,
};
pub use buffer::{Batch, ReplayBuffer, Transition};
pub use config::{discounted_budget, Method, TrainConfig};
pub use train::{train, EpisodeLog, EvalPoint, TrainOutcome};

use thiserror::Error;

use crate::envs::EnvError;
use crate::nn::NnError;
use crate::otp::OtpError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Otp(#[from] OtpError),
    #[error(transparent)]
    Env(#[from] EnvError),
}
