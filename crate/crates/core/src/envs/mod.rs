//! Built-in constrained control tasks with a nominal training setting and a
//! named physical parameter that is swept at test time.

mod chain;
mod point_goal;

pub use chain::{ChainConfig, ChainEnv};
pub use point_goal::{PointGoalConfig, PointGoalEnv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::GaussianPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("a test suite needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    /// True terminal state: no bootstrapping past it.
    pub terminal: bool,
    /// Episode cut by the horizon; the state is still bootstrapped.
    pub truncated: bool,
}

/// The test-time knob of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub name: String,
    pub value: f64,
    pub nominal: f64,
    pub range: (f64, f64),
}

/// Behavioral interface shared by all tasks.
pub trait Env: Send {
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepResult;
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> (f64, f64);
    fn perturbation(&self) -> Perturbation;
}

/// Any task's full configuration; the `task` field selects the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskConfig {
    Chain(ChainConfig),
    PointGoal(PointGoalConfig),
}

impl TaskConfig {
    /// Shipped defaults for a task name (`chain` or `point_goal`).
    pub fn builtin(name: &str) -> Result<Self, EnvError> {
        let text = match name {
            "chain" => include_str!("../../configs/chain.json"),
            "point_goal" | "pointgoal" => include_str!("../../configs/point_goal.json"),
            other => return Err(EnvError::UnknownTask(other.into())),
        };
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let cfg: TaskConfig =
            serde_json::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Chain(_) => "chain",
            TaskConfig::PointGoal(_) => "point_goal",
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            TaskConfig::Chain(c) => c.validate(),
            TaskConfig::PointGoal(c) => c.validate(),
        }
    }

    pub fn build(&self) -> Box<dyn Env> {
        match self {
            TaskConfig::Chain(c) => Box::new(ChainEnv::new(c.clone())),
            TaskConfig::PointGoal(c) => Box::new(PointGoalEnv::new(c.clone())),
        }
    }

    /// Safety budget on undiscounted episode cost.
    pub fn budget(&self) -> f64 {
        match self {
            TaskConfig::Chain(c) => c.budget,
            TaskConfig::PointGoal(c) => c.budget,
        }
    }

    pub fn set_budget(&mut self, b: f64) {
        match self {
            TaskConfig::Chain(c) => c.budget = b,
            TaskConfig::PointGoal(c) => c.budget = b,
        }
    }

    pub fn perturbation(&self) -> Perturbation {
        self.build().perturbation()
    }

    /// Same task with the perturbation parameter set to `value`.
    pub fn with_parameter(&self, value: f64) -> Result<Self, EnvError> {
        let p = self.perturbation();
        let (lo, hi) = p.range;
        if !(value >= lo && value <= hi) {
            return Err(EnvError::OutOfRange {
                name: p.name,
                value,
                lo,
                hi,
            });
        }
        let mut out = self.clone();
        match &mut out {
            TaskConfig::Chain(c) => c.slip = value,
            TaskConfig::PointGoal(c) => c.mass = value,
        }
        Ok(out)
    }
}

/// Evenly spaced parameter values over the test range (the nominal value is
/// hit exactly at the center for odd `n_points`).
pub fn make_test_suite(task: &TaskConfig, n_points: usize) -> Result<Vec<TaskConfig>, EnvError> {
    if n_points < 2 {
        return Err(EnvError::TooFewPoints(n_points));
    }
    let p = task.perturbation();
    let (lo, hi) = p.range;
    let last = (n_points - 1) as f64;
    (0..n_points)
        .map(|i| {
            let v = if 2 * i + 1 == n_points {
                p.nominal
            } else if i == n_points - 1 {
                hi
            } else {
                lo + (hi - lo) * (i as f64 / last)
            };
            task.with_parameter(v)
        })
        .collect()
}

/// Anything that can pick actions in an environment.
pub trait Actor {
    fn act(&self, state: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

impl Actor for GaussianPolicy {
    fn act(&self, state: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise: Vec<f64> = if deterministic {
            vec![0.0; self.action_dim()]
        } else {
            (0..self.action_dim())
                .map(|_| StandardNormal.sample(rng))
                .collect()
        };
        self.sample_one(state, &noise).expect("state matches policy input").0
    }
}

/// Adapter for closures `f(state, deterministic, rng) -> action`.
pub struct FnActor<F>(pub F);

impl<F: Fn(&[f64], bool, &mut ChaCha8Rng) -> Vec<f64>> Actor for FnActor<F> {
    fn act(&self, state: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (self.0)(state, deterministic, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub total_reward: f64,
    pub total_cost: f64,
    pub trajectory: Vec<TrajectoryStep>,
}

/// Runs one episode to the horizon (or a terminal state) and reports
/// undiscounted totals. `seed` drives both the reset and the action noise.
pub fn rollout(env: &mut dyn Env, actor: &dyn Actor, deterministic: bool, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ac70);
    let mut state = env.reset(seed);
    let mut ep = Episode {
        total_reward: 0.0,
        total_cost: 0.0,
        trajectory: Vec::with_capacity(env.horizon()),
    };
    for _ in 0..env.horizon() {
        let action = actor.act(&state, deterministic, &mut rng);
        let step = env.step(&action);
        ep.total_reward += step.reward;
        ep.total_cost += step.cost;
        let done = step.terminal || step.truncated;
        ep.trajectory.push(TrajectoryStep {
            state: std::mem::replace(&mut state, step.state.clone()),
            action,
            reward: step.reward,
            cost: step.cost,
            next_state: step.state,
            terminal: step.terminal,
        });
        if done {
            break;
        }
    }
    ep
}
