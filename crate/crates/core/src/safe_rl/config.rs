use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::envs::TaskConfig;
use crate::otp::{ClipMode, OtpConfig};

/// Safe policy-update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Maximize reward while the constraint estimate is within budget,
    /// otherwise minimize cost.
    Crpo,
    /// Ascend `Q_r - lambda (Q_c - B)` with a slowly adapted multiplier.
    Lagrange,
}

impl std::str::FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crpo" => Ok(Method::Crpo),
            "lagrange" => Ok(Method::Lagrange),
            other => Err(TrainError::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Crpo => "crpo",
            Method::Lagrange => "lagrange",
        })
    }
}

/// Every knob of a training run. Unknown JSON fields are rejected so a typo
/// in an override file cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch: usize,
    pub updates_per_step: usize,
    /// Environment steps between update rounds.
    pub update_every: usize,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_otp: f64,
    pub dual_lr_otp: f64,
    pub eps_delta: f64,
    /// Threshold on the critic's (discounted) cost estimate.
    pub budget: f64,
    pub method: Method,
    pub lagrange_dual_lr: f64,
    pub lagrange_init: f64,
    pub robust: bool,
    /// Keep the perturbation networks at their (identity) initialization.
    pub freeze_otp: bool,
    pub total_steps: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub critic_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub otp_hidden: Vec<usize>,
    pub layer_norm: bool,
    pub otp_clip: ClipMode,
    pub otp_per_sample_clip: bool,
    /// Policy action samples per state in the constraint estimate.
    pub constraint_samples: usize,
    /// Policy action samples per next state in the Bellman targets.
    pub target_samples: usize,
    /// Weight of the policy entropy bonus (0 disables it).
    pub entropy_coef: f64,
    /// Updates between logged diagnostic rows.
    pub log_every: usize,
    /// Environment steps between deterministic evaluation rollouts (0 disables).
    pub eval_every: usize,
    /// Environment steps between retained checkpoints (0: initial and final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 5e-3,
            batch: 256,
            updates_per_step: 1,
            update_every: 1,
            lr_policy: 1e-4,
            lr_critic: 1e-4,
            lr_otp: 1e-4,
            dual_lr_otp: 0.01,
            eps_delta: 0.02,
            budget: 100.0,
            method: Method::Crpo,
            lagrange_dual_lr: 5e-6,
            lagrange_init: 0.0,
            robust: true,
            freeze_otp: false,
            total_steps: 1_000_000,
            seed: 0,
            warmup_steps: 1000,
            buffer_capacity: 1_000_000,
            critic_hidden: vec![256, 256, 256],
            policy_hidden: vec![256, 256, 256],
            otp_hidden: vec![64, 64],
            layer_norm: true,
            otp_clip: ClipMode::Smooth,
            otp_per_sample_clip: false,
            constraint_samples: 4,
            target_samples: 1,
            entropy_coef: 0.0,
            log_every: 100,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

/// Discounted counterpart of an undiscounted episode budget: the discounted
/// cost of paying at the constant rate `budget / horizon`.
pub fn discounted_budget(budget: f64, horizon: usize, gamma: f64) -> f64 {
    if horizon == 0 {
        return 0.0;
    }
    budget / horizon as f64 * (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
}

impl TrainConfig {
    /// Small networks and batches that train on a single CPU core in minutes.
    pub fn desk_scale() -> Self {
        Self {
            batch: 64,
            update_every: 4,
            lr_policy: 3e-4,
            lr_critic: 3e-4,
            critic_hidden: vec![32, 32],
            policy_hidden: vec![32, 32],
            otp_hidden: vec![32, 32],
            buffer_capacity: 200_000,
            total_steps: 150_000,
            eval_every: 10_000,
            log_every: 250,
            ..Self::default()
        }
    }

    /// Defaults for a task: the budget is the discounted version of the task's
    /// episode budget.
    pub fn for_task(task: &TaskConfig) -> Self {
        let mut cfg = Self::desk_scale();
        cfg.set_task_budget(task);
        cfg
    }

    pub fn set_task_budget(&mut self, task: &TaskConfig) {
        self.budget = discounted_budget(task.budget(), task.build().horizon(), self.gamma);
    }

    pub fn otp_config(&self) -> OtpConfig {
        OtpConfig {
            eps_delta: self.eps_delta,
            hidden: self.otp_hidden.clone(),
            lr: self.lr_otp,
            dual_lr: self.dual_lr_otp,
            clip: self.otp_clip,
            per_sample_clip: self.otp_per_sample_clip,
            ..OtpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        let rates = [
            self.lr_policy,
            self.lr_critic,
            self.lr_otp,
            self.dual_lr_otp,
            self.lagrange_dual_lr,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.eps_delta > 0.0) {
            return bad("eps_delta must be positive");
        }
        if self.batch == 0 || self.updates_per_step == 0 || self.update_every == 0 {
            return bad("batch, updates_per_step and update_every must be positive");
        }
        if self.constraint_samples == 0 || self.target_samples == 0 {
            return bad("action sample counts must be positive");
        }
        if self.buffer_capacity == 0 || self.log_every == 0 {
            return bad("buffer_capacity and log_every must be positive");
        }
        if !self.budget.is_finite() || self.lagrange_init < 0.0 || self.entropy_coef < 0.0 {
            return bad("budget must be finite, lagrange_init and entropy_coef non-negative");
        }
        Ok(())
    }
}
