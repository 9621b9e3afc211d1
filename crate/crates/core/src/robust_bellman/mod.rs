//! Exact tabular robust Bellman operators over optimal transport uncertainty
//! sets, robust policy evaluation, and a brute-force robust constrained MDP
//! solver used as an oracle for the deep variant.

mod inner;
pub mod instances;
mod mdp;

pub use inner::{
    dual_objective, lambda_bracket, worst_case_expectation_dual, worst_case_expectation_primal,
    Direction, DualSolution, PrimalSolution,
};
pub use mdp::{CostMatrix, DiscreteRCMDP, QKind, QTable, TabularPolicy};

use thiserror::Error;

use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("invalid rcmdp: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("radius must be a finite non-negative number, got {0}")]
    NegativeRadius(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value function")]
    NonFinite,
    #[error("uncertainty set is empty")]
    Infeasible,
    #[error("inner solver failed: {0}")]
    Solver(String),
    #[error("policy evaluation did not converge in {iters} iterations (last gap {gap:e})")]
    NotConverged { iters: usize, gap: f64 },
    #[error("brute force is limited to {max_states} states and {max_actions} actions")]
    TooLarge { max_states: usize, max_actions: usize },
}

impl QKind {
    /// Rewards are pessimized from below, costs from above.
    pub fn direction(self) -> Direction {
        match self {
            QKind::Reward => Direction::Inf,
            QKind::Cost => Direction::Sup,
        }
    }
}

/// Which route solves the per-(s, a) inner problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerSolver {
    #[default]
    Primal,
    Dual,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ApplyOptions {
    pub solver: InnerSolver,
    pub exec: Execution,
}

impl ApplyOptions {
    pub fn with_solver(solver: InnerSolver) -> Self {
        Self {
            solver,
            ..Self::default()
        }
    }
}

/// Worst-case expectation of `values` over the ball at `(s, a)`.
pub fn inner_value(
    mdp: &DiscreteRCMDP,
    s: usize,
    a: usize,
    values: &[f64],
    direction: Direction,
    solver: InnerSolver,
) -> Result<f64, RobustError> {
    let p_hat = &mdp.nominal[s][a];
    let cost = mdp.cost_matrix.for_pair(s, a);
    let eps = mdp.radius[s][a];
    match solver {
        InnerSolver::Primal => {
            worst_case_expectation_primal(p_hat, values, cost, eps, direction).map(|p| p.value)
        }
        InnerSolver::Dual => {
            worst_case_expectation_dual(p_hat, values, cost, eps, direction).map(|d| d.value)
        }
    }
}

/// `(T Q)(s, a) = r(s, a) + gamma * opt_{p in P_{s,a}} E_p[V^pi]`, with `inf`
/// for reward tables and `sup` for cost tables.
pub fn robust_bellman_apply(
    mdp: &DiscreteRCMDP,
    policy: &TabularPolicy,
    q: &QTable,
    opts: ApplyOptions,
) -> Result<QTable, RobustError> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    policy.check_shape(ns, na)?;
    if q.values.len() != ns || q.values.iter().any(|r| r.len() != na) {
        return Err(RobustError::Shape("q table does not match the mdp".into()));
    }
    let v = q.state_values(policy);
    let immediate = match q.kind {
        QKind::Reward => &mdp.reward,
        QKind::Cost => &mdp.cost,
    };
    let direction = q.kind.direction();
    let cells = par::map_indexed(ns * na, opts.exec, |k| {
        let (s, a) = (k / na, k % na);
        inner_value(mdp, s, a, &v, direction, opts.solver)
            .map(|w| immediate[s][a] + mdp.gamma * w)
    });
    let mut values = vec![vec![0.0; na]; ns];
    for (k, cell) in cells.into_iter().enumerate() {
        values[k / na][k % na] = cell?;
    }
    Ok(QTable {
        values,
        kind: q.kind,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub tol: f64,
    /// Defaults to `10 * ceil(log(tol (1 - gamma)) / log gamma)` when `None`.
    pub max_iters: Option<usize>,
    pub apply: ApplyOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: None,
            apply: ApplyOptions::default(),
        }
    }
}

pub fn default_max_iters(tol: f64, gamma: f64) -> usize {
    let k = ((tol * (1.0 - gamma)).ln() / gamma.ln()).ceil();
    10 * (k.max(1.0) as usize)
}

/// Fixed point of the robust operator, iterated from `Q = 0`.
pub fn robust_policy_evaluation(
    mdp: &DiscreteRCMDP,
    policy: &TabularPolicy,
    kind: QKind,
    opts: EvalOptions,
) -> Result<QTable, RobustError> {
    let max_iters = opts
        .max_iters
        .unwrap_or_else(|| default_max_iters(opts.tol, mdp.gamma));
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions, kind);
    let mut gap = f64::INFINITY;
    for _ in 0..max_iters {
        let next = robust_bellman_apply(mdp, policy, &q, opts.apply)?;
        gap = next.sup_distance(&q);
        q = next;
        if gap <= opts.tol {
            return Ok(q);
        }
    }
    Err(RobustError::NotConverged {
        iters: max_iters,
        gap,
    })
}

/// `sum_s rho0(s) V(s)` for a table of the given policy.
pub fn initial_value(mdp: &DiscreteRCMDP, policy: &TabularPolicy, q: &QTable) -> f64 {
    q.state_values(policy)
        .iter()
        .zip(&mdp.rho0)
        .map(|(v, p)| v * p)
        .sum()
}

pub const BRUTE_FORCE_MAX_STATES: usize = 4;
pub const BRUTE_FORCE_MAX_ACTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRecord {
    pub actions: Vec<usize>,
    /// Worst-case (inf) discounted reward from `rho0`.
    pub j_reward: f64,
    /// Worst-case (sup) discounted cost from `rho0`.
    pub j_cost: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    /// Best feasible policy, `None` if no deterministic policy meets the budget.
    pub best: Option<(TabularPolicy, f64, f64)>,
    /// Every deterministic policy in lexicographic order of its action vector.
    pub records: Vec<PolicyRecord>,
}

impl BruteForceResult {
    pub fn is_infeasible(&self) -> bool {
        self.best.is_none()
    }

    pub fn feasible_set(&self) -> Vec<Vec<usize>> {
        self.records
            .iter()
            .filter(|r| r.feasible)
            .map(|r| r.actions.clone())
            .collect()
    }
}

/// Enumerates all deterministic policies and returns the one maximizing the
/// worst-case reward among those whose worst-case cost is within `budget`.
pub fn solve_rcmdp_bruteforce(
    mdp: &DiscreteRCMDP,
    budget: f64,
    opts: EvalOptions,
) -> Result<BruteForceResult, RobustError> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if ns > BRUTE_FORCE_MAX_STATES || na > BRUTE_FORCE_MAX_ACTIONS {
        return Err(RobustError::TooLarge {
            max_states: BRUTE_FORCE_MAX_STATES,
            max_actions: BRUTE_FORCE_MAX_ACTIONS,
        });
    }
    let total = na.pow(ns as u32);
    let all: Vec<Vec<usize>> = (0..total)
        .map(|mut code| {
            let mut acts = vec![0; ns];
            for slot in acts.iter_mut().rev() {
                *slot = code % na;
                code /= na;
            }
            acts
        })
        .collect();
    let inner_opts = EvalOptions {
        apply: ApplyOptions {
            exec: Execution::Sequential,
            ..opts.apply
        },
        ..opts
    };
    let evaluated = par::map_slice(&all, opts.apply.exec, |acts| {
        let pi = TabularPolicy::deterministic(acts, na);
        let qr = robust_policy_evaluation(mdp, &pi, QKind::Reward, inner_opts)?;
        let qc = robust_policy_evaluation(mdp, &pi, QKind::Cost, inner_opts)?;
        Ok::<_, RobustError>((initial_value(mdp, &pi, &qr), initial_value(mdp, &pi, &qc)))
    });
    let mut records = Vec::with_capacity(total);
    let mut best: Option<(usize, f64, f64)> = None;
    for (idx, (acts, res)) in all.into_iter().zip(evaluated).enumerate() {
        let (jr, jc) = res?;
        let feasible = jc <= budget;
        if feasible && best.map_or(true, |(_, b, _)| jr > b) {
            best = Some((idx, jr, jc));
        }
        records.push(PolicyRecord {
            actions: acts,
            j_reward: jr,
            j_cost: jc,
            feasible,
        });
    }
    let best = best.map(|(idx, jr, jc)| {
        (
            TabularPolicy::deterministic(&records[idx].actions, na),
            jr,
            jc,
        )
    });
    Ok(BruteForceResult { best, records })
}
