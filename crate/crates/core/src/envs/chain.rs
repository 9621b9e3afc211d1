use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, Perturbation, StepResult};
use crate::robust_bellman::{CostMatrix, DiscreteRCMDP};

/// A short corridor: action 1 moves right, action 0 moves left, and with
/// probability `slip` the move goes the other way (walls clamp).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Coordinates of the states on a line; ground transport cost is `|x_i - x_j|`.
    pub positions: Vec<f64>,
    /// `reward[s][a]` in `[0, 1]`.
    pub reward: Vec<Vec<f64>>,
    /// `cost[s][a]` in `{0, 1}`.
    pub cost: Vec<Vec<f64>>,
    pub start: usize,
    pub slip: f64,
    pub slip_range: (f64, f64),
    pub horizon: usize,
    /// Discount of the tabular view.
    pub gamma: f64,
    pub budget: f64,
}

impl ChainConfig {
    pub fn n_states(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let n = self.n_states();
        let bad = |m: &str| Err(EnvError::Config(m.into()));
        if n < 2 {
            return bad("chain needs at least two states");
        }
        let shape = |t: &Vec<Vec<f64>>| t.len() == n && t.iter().all(|r| r.len() == 2);
        if !shape(&self.reward) || !shape(&self.cost) {
            return bad("reward and cost must be n_states x 2");
        }
        if self.reward.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("rewards must lie in [0, 1]");
        }
        if self.cost.iter().flatten().any(|c| *c != 0.0 && *c != 1.0) {
            return bad("costs must be 0 or 1");
        }
        if self.start >= n {
            return bad("start state out of range");
        }
        let (lo, hi) = self.slip_range;
        if !(0.0 <= lo && lo <= self.slip && self.slip <= hi && hi <= 1.0) {
            return bad("slip must lie inside slip_range within [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        Ok(())
    }

    /// `P(s' | s, a)` under the configured slip.
    pub fn kernel(&self) -> Vec<Vec<Vec<f64>>> {
        let n = self.n_states();
        (0..n)
            .map(|s| {
                (0..2)
                    .map(|a| {
                        let mut row = vec![0.0; n];
                        let (fwd, back) = moves(s, a, n);
                        row[fwd] += 1.0 - self.slip;
                        row[back] += self.slip;
                        row
                    })
                    .collect()
            })
            .collect()
    }

    /// The same task as a robust constrained MDP with uniform radius `eps`.
    pub fn to_rcmdp(&self, eps: f64) -> DiscreteRCMDP {
        let n = self.n_states();
        let mut rho0 = vec![0.0; n];
        rho0[self.start] = 1.0;
        let metric = self
            .positions
            .iter()
            .map(|a| self.positions.iter().map(|b| (a - b).abs()).collect())
            .collect();
        DiscreteRCMDP {
            n_states: n,
            n_actions: 2,
            nominal: self.kernel(),
            reward: self.reward.clone(),
            cost: self.cost.clone(),
            gamma: self.gamma,
            rho0,
            radius: vec![vec![eps; 2]; n],
            cost_matrix: CostMatrix::Shared(metric),
        }
    }
}

/// Intended and slipped destinations of action `a` from `s`.
fn moves(s: usize, a: usize, n: usize) -> (usize, usize) {
    let right = (s + 1).min(n - 1);
    let left = s.saturating_sub(1);
    if a == 1 {
        (right, left)
    } else {
        (left, right)
    }
}

/// One-hot view of the chain with a single continuous action: `a > 0` moves
/// right, anything else moves left.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    cfg: ChainConfig,
    state: usize,
    t: usize,
    rng: ChaCha8Rng,
}

impl ChainEnv {
    pub fn new(cfg: ChainConfig) -> Self {
        let start = cfg.start;
        Self {
            cfg,
            state: start,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }

    pub fn state_index(&self) -> usize {
        self.state
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.cfg.n_states()];
        v[s] = 1.0;
        v
    }

    pub fn discrete_action(action: &[f64]) -> usize {
        usize::from(action[0] > 0.0)
    }
}

impl Env for ChainEnv {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.cfg.start;
        self.t = 0;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = Self::discrete_action(action);
        let s = self.state;
        let (fwd, back) = moves(s, a, self.cfg.n_states());
        let u: f64 = self.rng.gen();
        self.state = if u < self.cfg.slip { back } else { fwd };
        self.t += 1;
        StepResult {
            state: self.one_hot(self.state),
            reward: self.cfg.reward[s][a],
            cost: self.cfg.cost[s][a],
            terminal: false,
            truncated: self.t >= self.cfg.horizon,
        }
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn state_dim(&self) -> usize {
        self.cfg.n_states()
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn perturbation(&self) -> Perturbation {
        let (lo, hi) = self.cfg.slip_range;
        Perturbation {
            name: "slip".into(),
            value: self.cfg.slip,
            nominal: 0.5 * (lo + hi),
            range: self.cfg.slip_range,
        }
    }
}
