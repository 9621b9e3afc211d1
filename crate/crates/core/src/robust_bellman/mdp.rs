use serde::{Deserialize, Serialize};

use super::RobustError;
use crate::transport::validate_probs;

/// Per-(s, a) ground cost on state indices, or one matrix shared by all pairs.
/// `+inf` entries (forbidden moves) are written as `null` in JSON.
#[derive(Debug, Clone, PartialEq)]
pub enum CostMatrix {
    Shared(Vec<Vec<f64>>),
    PerPair(Vec<Vec<Vec<Vec<f64>>>>),
}

impl CostMatrix {
    pub fn for_pair(&self, s: usize, a: usize) -> &[Vec<f64>] {
        match self {
            CostMatrix::Shared(m) => m,
            CostMatrix::PerPair(m) => &m[s][a],
        }
    }
}

/// Finite-state robust constrained MDP with an (s, a)-rectangular optimal
/// transport uncertainty set around the nominal kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRcmdp", into = "RawRcmdp")]
pub struct DiscreteRCMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// `nominal[s][a][s']`
    pub nominal: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub gamma: f64,
    pub rho0: Vec<f64>,
    pub radius: Vec<Vec<f64>>,
    pub cost_matrix: CostMatrix,
}

impl DiscreteRCMDP {
    pub fn validate(&self) -> Result<(), RobustError> {
        let (ns, na) = (self.n_states, self.n_actions);
        let bad = |msg: String| Err(RobustError::InvalidMdp(msg));
        if ns == 0 || na == 0 {
            return bad("empty state or action space".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        let shape_ok = |t: &Vec<Vec<f64>>| t.len() == ns && t.iter().all(|r| r.len() == na);
        if !shape_ok(&self.reward) || !shape_ok(&self.cost) || !shape_ok(&self.radius) {
            return bad("reward/cost/radius must be n_states x n_actions".into());
        }
        if self.reward.iter().flatten().any(|x| !x.is_finite()) {
            return bad("non-finite reward".into());
        }
        if self.cost.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("costs must be finite and non-negative".into());
        }
        if self.radius.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("radii must be finite and non-negative".into());
        }
        if self.nominal.len() != ns {
            return bad("nominal kernel has wrong number of states".into());
        }
        for (s, row) in self.nominal.iter().enumerate() {
            if row.len() != na {
                return bad(format!("nominal[{s}] has wrong number of actions"));
            }
            for (a, dist) in row.iter().enumerate() {
                if dist.len() != ns {
                    return bad(format!("nominal[{s}][{a}] has wrong length"));
                }
                validate_probs(dist)
                    .map_err(|e| RobustError::InvalidMdp(format!("nominal[{s}][{a}]: {e}")))?;
            }
        }
        if self.rho0.len() != ns {
            return bad("rho0 has wrong length".into());
        }
        validate_probs(&self.rho0).map_err(|e| RobustError::InvalidMdp(format!("rho0: {e}")))?;
        let check = |m: &Vec<Vec<f64>>, tag: &str| -> Result<(), RobustError> {
            if m.len() != ns || m.iter().any(|r| r.len() != ns) {
                return Err(RobustError::InvalidMdp(format!("{tag}: must be n_states x n_states")));
            }
            for i in 0..ns {
                if m[i][i] != 0.0 {
                    return Err(RobustError::InvalidMdp(format!("{tag}: diagonal must be 0")));
                }
                if m[i].iter().any(|x| x.is_nan() || *x < 0.0) {
                    return Err(RobustError::InvalidMdp(format!("{tag}: negative entry")));
                }
            }
            Ok(())
        };
        match &self.cost_matrix {
            CostMatrix::Shared(m) => check(m, "cost_matrix")?,
            CostMatrix::PerPair(all) => {
                if all.len() != ns || all.iter().any(|r| r.len() != na) {
                    return bad("per-pair cost_matrix must be n_states x n_actions".into());
                }
                for (s, row) in all.iter().enumerate() {
                    for (a, m) in row.iter().enumerate() {
                        check(m, &format!("cost_matrix[{s}][{a}]"))?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RobustError> {
        serde_json::from_str(text).map_err(|e| RobustError::InvalidMdp(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rcmdp serializes")
    }

    /// Same MDP with every radius replaced by `eps`.
    pub fn with_uniform_radius(&self, eps: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.radius {
            row.iter_mut().for_each(|r| *r = eps);
        }
        out
    }
}

fn to_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn from_null(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::INFINITY)
}

type NullMatrix = Vec<Vec<Option<f64>>>;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawCost {
    Shared(NullMatrix),
    PerPair(Vec<Vec<NullMatrix>>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRcmdp {
    n_states: usize,
    n_actions: usize,
    nominal: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    cost: Vec<Vec<f64>>,
    gamma: f64,
    rho0: Vec<f64>,
    radius: Vec<Vec<f64>>,
    cost_matrix: RawCost,
}

impl TryFrom<RawRcmdp> for DiscreteRCMDP {
    type Error = RobustError;

    fn try_from(raw: RawRcmdp) -> Result<Self, Self::Error> {
        let conv = |m: NullMatrix| -> Vec<Vec<f64>> {
            m.into_iter()
                .map(|r| r.into_iter().map(from_null).collect())
                .collect()
        };
        let cost_matrix = match raw.cost_matrix {
            RawCost::Shared(m) => CostMatrix::Shared(conv(m)),
            RawCost::PerPair(all) => CostMatrix::PerPair(
                all.into_iter()
                    .map(|row| row.into_iter().map(conv).collect())
                    .collect(),
            ),
        };
        let mdp = DiscreteRCMDP {
            n_states: raw.n_states,
            n_actions: raw.n_actions,
            nominal: raw.nominal,
            reward: raw.reward,
            cost: raw.cost,
            gamma: raw.gamma,
            rho0: raw.rho0,
            radius: raw.radius,
            cost_matrix,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl From<DiscreteRCMDP> for RawRcmdp {
    fn from(m: DiscreteRCMDP) -> Self {
        let conv = |m: Vec<Vec<f64>>| -> NullMatrix {
            m.into_iter()
                .map(|r| r.into_iter().map(to_null).collect())
                .collect()
        };
        RawRcmdp {
            n_states: m.n_states,
            n_actions: m.n_actions,
            nominal: m.nominal,
            reward: m.reward,
            cost: m.cost,
            gamma: m.gamma,
            rho0: m.rho0,
            radius: m.radius,
            cost_matrix: match m.cost_matrix {
                CostMatrix::Shared(x) => RawCost::Shared(conv(x)),
                CostMatrix::PerPair(all) => RawCost::PerPair(
                    all.into_iter()
                        .map(|row| row.into_iter().map(conv).collect())
                        .collect(),
                ),
            },
        }
    }
}

/// Stationary stochastic policy, `probs[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, RobustError> {
        for (s, row) in probs.iter().enumerate() {
            validate_probs(row)
                .map_err(|e| RobustError::InvalidPolicy(format!("state {s}: {e}")))?;
        }
        Ok(Self { probs })
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub(crate) fn check_shape(&self, ns: usize, na: usize) -> Result<(), RobustError> {
        if self.probs.len() != ns || self.probs.iter().any(|r| r.len() != na) {
            return Err(RobustError::InvalidPolicy(format!(
                "policy must be {ns}x{na}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QKind {
    Reward,
    Cost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
    pub kind: QKind,
}

impl QTable {
    pub fn zeros(ns: usize, na: usize, kind: QKind) -> Self {
        Self {
            values: vec![vec![0.0; na]; ns],
            kind,
        }
    }

    /// `V(s) = sum_a pi(a|s) Q(s, a)`.
    pub fn state_values(&self, policy: &TabularPolicy) -> Vec<f64> {
        self.values
            .iter()
            .zip(policy.probs())
            .map(|(q, p)| q.iter().zip(p).map(|(x, w)| x * w).sum())
            .collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
