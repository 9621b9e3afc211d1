//! Transport costs and exact optimal transport between finitely supported
//! distributions.
//!
//! The optimal transport cost between `p_hat` and `p` is the cheapest coupling
//! with those marginals, solved here as a transportation linear program. Pairs
//! with infinite cost are left out of the program entirely.

pub mod lp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lp::{LinearProgram, LpError, Relation};

/// Tolerance on `sum(probs) == 1`.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("infeasible transport")]
    InfeasibleTransport,
    #[error("cost matrix is {0}x{1}, expected {2}x{3}")]
    CostShape(usize, usize, usize, usize),
    #[error("lp solver: {0}")]
    Solver(#[from] LpError),
}

/// A point of the state space, all coordinates finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVec(Vec<f64>);

impl StateVec {
    pub fn new(coords: Vec<f64>) -> Result<Self, TransportError> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(TransportError::NonFinite);
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Deref for StateVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Ground cost `d(s_hat', s')` between a nominal and a candidate next state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransportCost {
    /// Mean squared relative deviation of the displacement from `base`:
    /// `(1/n) sum_i ((s'_i - s_i) / (s_hat'_i - s_i) - 1)^2`, with `0/0 = 1`.
    /// A coordinate with `s_hat'_i == s_i` but `s'_i != s_i` costs `+inf`.
    PercentSq { base: StateVec },
    /// Euclidean distance raised to the power `p >= 1`.
    PNormPow { p: f64 },
    /// `1[s_hat' != s']`; optimal transport under it is total variation.
    Indicator,
}

impl TransportCost {
    pub fn percent_sq(base: StateVec) -> Self {
        TransportCost::PercentSq { base }
    }

    /// Evaluates the cost. Returns `f64::INFINITY` for unreachable pairs.
    pub fn eval(&self, s_hat_prime: &[f64], s_prime: &[f64]) -> Result<f64, TransportError> {
        eval_cost(self, s_hat_prime, s_prime)
    }
}

pub fn eval_cost(
    cost: &TransportCost,
    s_hat_prime: &[f64],
    s_prime: &[f64],
) -> Result<f64, TransportError> {
    if s_hat_prime.len() != s_prime.len() {
        return Err(TransportError::DimensionMismatch(
            s_hat_prime.len(),
            s_prime.len(),
        ));
    }
    if s_hat_prime.iter().chain(s_prime).any(|x| x.is_nan()) {
        return Err(TransportError::NonFinite);
    }
    let n = s_prime.len();
    match cost {
        TransportCost::PercentSq { base } => {
            if base.dim() != n {
                return Err(TransportError::DimensionMismatch(base.dim(), n));
            }
            if n == 0 {
                return Ok(0.0);
            }
            let mut total = 0.0;
            for i in 0..n {
                let nominal = s_hat_prime[i] - base[i];
                let moved = s_prime[i] - base[i];
                if nominal == 0.0 {
                    if moved != 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    // 0/0 = 1 contributes nothing.
                    continue;
                }
                let dev = moved / nominal - 1.0;
                total += dev * dev;
            }
            Ok(total / n as f64)
        }
        TransportCost::PNormPow { p } => {
            let sq: f64 = s_hat_prime
                .iter()
                .zip(s_prime)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if sq == 0.0 {
                return Ok(0.0);
            }
            Ok(sq.sqrt().powf(*p))
        }
        TransportCost::Indicator => Ok(if s_hat_prime == s_prime { 0.0 } else { 1.0 }),
    }
}

/// Finitely supported distribution over points of the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    support: Vec<StateVec>,
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(support: Vec<StateVec>, probs: Vec<f64>) -> Result<Self, TransportError> {
        if support.len() != probs.len() {
            return Err(TransportError::DimensionMismatch(support.len(), probs.len()));
        }
        validate_probs(&probs)?;
        if let Some(first) = support.first() {
            if let Some(bad) = support.iter().find(|s| s.dim() != first.dim()) {
                return Err(TransportError::DimensionMismatch(first.dim(), bad.dim()));
            }
        }
        for i in 0..support.len() {
            for j in 0..i {
                if support[i] == support[j] {
                    return Err(TransportError::InvalidDistribution(format!(
                        "support points {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { support, probs })
    }

    /// Point mass at `x`.
    pub fn dirac(x: StateVec) -> Self {
        Self {
            support: vec![x],
            probs: vec![1.0],
        }
    }

    /// Distribution on scalar support points.
    pub fn on_line(points: &[f64], probs: &[f64]) -> Result<Self, TransportError> {
        let support = points
            .iter()
            .map(|&x| StateVec::new(vec![x]))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(support, probs.to_vec())
    }

    pub fn support(&self) -> &[StateVec] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn validate_probs(probs: &[f64]) -> Result<(), TransportError> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(TransportError::InvalidDistribution(
            "negative or non-finite probability".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(TransportError::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

/// Optimal coupling together with the transportation duals.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub cost: f64,
    /// `plan[i][j]` is the mass moved from `p_hat` point `i` to `p` point `j`.
    pub plan: Vec<Vec<f64>>,
    /// Row potentials (one per `p_hat` point).
    pub u: Vec<f64>,
    /// Column potentials (one per `p` point).
    pub v: Vec<f64>,
}

/// Exact transport between weight vectors under an explicit cost matrix
/// (`cost[i][j]`, `+inf` entries are forbidden pairs).
pub fn optimal_coupling_matrix(
    p_hat: &[f64],
    p: &[f64],
    cost: &[Vec<f64>],
) -> Result<Coupling, TransportError> {
    let (m, k) = (p_hat.len(), p.len());
    if cost.len() != m || cost.iter().any(|row| row.len() != k) {
        let cols = cost.first().map_or(0, |r| r.len());
        return Err(TransportError::CostShape(cost.len(), cols, m, k));
    }
    if cost.iter().flatten().any(|c| c.is_nan() || *c < 0.0) {
        return Err(TransportError::NonFinite);
    }
    // A row (or column) with mass but no finite entry can never be served.
    for i in 0..m {
        if p_hat[i] > 0.0 && cost[i].iter().all(|c| c.is_infinite()) {
            return Err(TransportError::InfeasibleTransport);
        }
    }
    for j in 0..k {
        if p[j] > 0.0 && (0..m).all(|i| cost[i][j].is_infinite()) {
            return Err(TransportError::InfeasibleTransport);
        }
    }

    let mut cells = Vec::new();
    for i in 0..m {
        for j in 0..k {
            if cost[i][j].is_finite() {
                cells.push((i, j));
            }
        }
    }
    let mut lp = LinearProgram::new(cells.len());
    for (v, &(i, j)) in cells.iter().enumerate() {
        lp.objective[v] = cost[i][j];
    }
    for i in 0..m {
        let row = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.0 == i)
            .map(|(v, _)| (v, 1.0))
            .collect();
        lp.add(row, Relation::Eq, p_hat[i]);
    }
    for j in 0..k {
        let col = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.1 == j)
            .map(|(v, _)| (v, 1.0))
            .collect();
        lp.add(col, Relation::Eq, p[j]);
    }
    let sol = match lp.solve() {
        Ok(s) => s,
        Err(LpError::Infeasible(_)) => return Err(TransportError::InfeasibleTransport),
        Err(e) => return Err(e.into()),
    };
    let mut plan = vec![vec![0.0; k]; m];
    for (v, &(i, j)) in cells.iter().enumerate() {
        plan[i][j] = sol.x[v];
    }
    Ok(Coupling {
        cost: sol.objective,
        plan,
        u: sol.duals[..m].to_vec(),
        v: sol.duals[m..].to_vec(),
    })
}

/// Cost matrix `d(p_hat point i, p point j)`.
pub fn cost_matrix(
    p_hat: &DiscreteDist,
    p: &DiscreteDist,
    cost: &TransportCost,
) -> Result<Vec<Vec<f64>>, TransportError> {
    p_hat
        .support()
        .iter()
        .map(|a| {
            p.support()
                .iter()
                .map(|b| eval_cost(cost, a, b))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect()
}

pub fn optimal_coupling(
    p_hat: &DiscreteDist,
    p: &DiscreteDist,
    cost: &TransportCost,
) -> Result<Coupling, TransportError> {
    let c = cost_matrix(p_hat, p, cost)?;
    optimal_coupling_matrix(p_hat.probs(), p.probs(), &c)
}

/// Optimal transport cost between two finitely supported distributions.
pub fn otc_discrete(
    p_hat: &DiscreteDist,
    p: &DiscreteDist,
    cost: &TransportCost,
) -> Result<f64, TransportError> {
    Ok(optimal_coupling(p_hat, p, cost)?.cost.max(0.0))
}
