use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, Perturbation, StepResult};

/// A point mass pushed towards a goal on the plane, with a hazard disk on the
/// straight line between start and goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGoalConfig {
    pub start: [f64; 2],
    /// Half-width of the uniform start-position jitter applied at reset.
    pub start_jitter: f64,
    pub goal: [f64; 2],
    pub hazard_center: [f64; 2],
    pub hazard_radius: f64,
    pub dt: f64,
    pub damping: f64,
    pub mass: f64,
    pub mass_range: (f64, f64),
    pub position_bound: f64,
    pub horizon: usize,
    pub budget: f64,
}

impl PointGoalConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.into()));
        let (lo, hi) = self.mass_range;
        if !(0.0 < lo && lo <= self.mass && self.mass <= hi) {
            return bad("mass must be positive and inside mass_range");
        }
        if !(self.dt > 0.0 && self.damping >= 0.0 && self.hazard_radius >= 0.0) {
            return bad("dt must be positive, damping and hazard radius non-negative");
        }
        if !(self.position_bound > 0.0 && self.start_jitter >= 0.0) {
            return bad("position bound must be positive, jitter non-negative");
        }
        let inside = |p: [f64; 2]| p.iter().all(|x| x.abs() <= self.position_bound);
        if !inside(self.start) || !inside(self.goal) {
            return bad("start and goal must lie inside the bounding box");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PointGoalEnv {
    cfg: PointGoalConfig,
    /// `(x, y, vx, vy)`
    state: [f64; 4],
    t: usize,
}

impl PointGoalEnv {
    pub fn new(cfg: PointGoalConfig) -> Self {
        let state = [cfg.start[0], cfg.start[1], 0.0, 0.0];
        Self { cfg, state, t: 0 }
    }

    pub fn config(&self) -> &PointGoalConfig {
        &self.cfg
    }

    /// Pure transition function: `(state, action) -> (next, reward, cost)`.
    pub fn transition(cfg: &PointGoalConfig, state: &[f64; 4], action: &[f64]) -> ([f64; 4], f64, f64) {
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let mut next = *state;
        for k in 0..2 {
            let v = state[2 + k] + cfg.dt * (a[k] / cfg.mass - cfg.damping * state[2 + k]);
            next[2 + k] = v;
            next[k] = (state[k] + cfg.dt * v).clamp(-cfg.position_bound, cfg.position_bound);
        }
        let dist = |c: [f64; 2]| ((next[0] - c[0]).powi(2) + (next[1] - c[1]).powi(2)).sqrt();
        let reward = (-dist(cfg.goal)).exp();
        let cost = if dist(cfg.hazard_center) < cfg.hazard_radius {
            1.0
        } else {
            0.0
        };
        (next, reward, cost)
    }
}

impl Env for PointGoalEnv {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = self.cfg.start_jitter;
        let mut jitter = || if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
        self.state = [
            self.cfg.start[0] + jitter(),
            self.cfg.start[1] + jitter(),
            0.0,
            0.0,
        ];
        self.t = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let (next, reward, cost) = Self::transition(&self.cfg, &self.state, action);
        self.state = next;
        self.t += 1;
        StepResult {
            state: next.to_vec(),
            reward,
            cost,
            terminal: false,
            truncated: self.t >= self.cfg.horizon,
        }
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn perturbation(&self) -> Perturbation {
        let (lo, hi) = self.cfg.mass_range;
        Perturbation {
            name: "mass".into(),
            value: self.cfg.mass,
            nominal: 0.5 * (lo + hi),
            range: self.cfg.mass_range,
        }
    }
}
