//! Seeded random instances for property checks: inner worst-case problems and
//! small robust constrained MDPs under each supported ground cost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mdp::{CostMatrix, DiscreteRCMDP};
use crate::transport::{eval_cost, StateVec, TransportCost};

/// Ground cost family used to build index-level cost matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundCost {
    /// Indicator cost (total variation).
    Tv,
    /// Euclidean distance between state coordinates.
    PNorm1,
    /// Squared Euclidean distance between state coordinates.
    PNorm2,
    /// Percentage cost relative to the current state's coordinates; produces
    /// `+inf` entries where a coordinate is pinned at the current state.
    PercentSq,
}

impl GroundCost {
    pub const ALL: [GroundCost; 4] = [
        GroundCost::Tv,
        GroundCost::PNorm1,
        GroundCost::PNorm2,
        GroundCost::PercentSq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroundCost::Tv => "tv",
            GroundCost::PNorm1 => "pnorm1",
            GroundCost::PNorm2 => "pnorm2",
            GroundCost::PercentSq => "percent_sq",
        }
    }
}

/// One `opt_{p : OTC(p_hat, p) <= eps} E_p[values]` instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProblem {
    pub kind: GroundCost,
    pub p_hat: Vec<f64>,
    pub values: Vec<f64>,
    /// `+inf` (forbidden) entries are serialized as `null`.
    #[serde(with = "inf_as_null")]
    pub cost: Vec<Vec<f64>>,
    pub eps: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Vec<Option<f64>>> = m
            .iter()
            .map(|r| r.iter().map(|x| x.is_finite().then_some(*x)).collect())
            .collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let raw: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
            .collect())
    }
}

/// Distinct state coordinates. Percentage costs need exact coordinate ties
/// with the current state, so they live on a small integer grid.
fn coordinates<R: Rng>(rng: &mut R, n: usize, kind: GroundCost) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
    while pts.len() < n {
        let p = match kind {
            GroundCost::PercentSq => vec![
                rng.gen_range(-2i32..=2) as f64,
                rng.gen_range(-2i32..=2) as f64,
            ],
            _ => vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        };
        if !pts.contains(&p) {
            pts.push(p);
        }
    }
    pts
}

/// Cost matrix between states `i -> j`, relative to the current state `base`.
fn index_costs(pts: &[Vec<f64>], kind: GroundCost, base: usize) -> Vec<Vec<f64>> {
    let cost = match kind {
        GroundCost::Tv => TransportCost::Indicator,
        GroundCost::PNorm1 => TransportCost::PNormPow { p: 1.0 },
        GroundCost::PNorm2 => TransportCost::PNormPow { p: 2.0 },
        GroundCost::PercentSq => {
            TransportCost::percent_sq(StateVec::new(pts[base].clone()).expect("finite grid"))
        }
    };
    pts.iter()
        .map(|a| {
            pts.iter()
                .map(|b| eval_cost(&cost, a, b).expect("matching dimensions"))
                .collect()
        })
        .collect()
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize, sparsity: f64) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < sparsity {
                    0.0
                } else {
                    -rng.gen::<f64>().max(1e-300).ln()
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
            // Put the rounding residue on the largest entry so the sum is 1.
            let resid = 1.0 - p.iter().sum::<f64>();
            let k = (0..n)
                .max_by(|&a, &b| p[a].total_cmp(&p[b]))
                .expect("non-empty");
            p[k] += resid;
            return p;
        }
    }
}

/// Mean of the finite positive entries on rows with nominal mass.
fn typical_cost(p_hat: &[f64], cost: &[Vec<f64>]) -> f64 {
    let pos: Vec<f64> = p_hat
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .flat_map(|(i, _)| cost[i].iter().copied())
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    if pos.is_empty() {
        1.0
    } else {
        pos.iter().sum::<f64>() / pos.len() as f64
    }
}

pub fn random_inner_problem<R: Rng>(rng: &mut R, kind: GroundCost) -> InnerProblem {
    let n = rng.gen_range(2..=6);
    let pts = coordinates(rng, n, kind);
    let base = rng.gen_range(0..n);
    let cost = index_costs(&pts, kind, base);
    let p_hat = random_simplex(rng, n, 0.25);
    let scale = rng.gen_range(0.1..5.0);
    let values = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    let eps = if rng.gen::<f64>() < 0.1 {
        0.0
    } else {
        rng.gen_range(0.0..1.5) * typical_cost(&p_hat, &cost)
    };
    InnerProblem {
        kind,
        p_hat,
        values,
        cost,
        eps,
    }
}

/// Random robust constrained MDP with per-pair costs of the given family.
/// Radii are drawn from `[0, max_radius]`.
pub fn random_rcmdp<R: Rng>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    kind: GroundCost,
    max_radius: f64,
) -> DiscreteRCMDP {
    let pts = coordinates(rng, n_states, kind);
    let per_state: Vec<Vec<Vec<f64>>> = (0..n_states).map(|s| index_costs(&pts, kind, s)).collect();
    let cost_matrix = CostMatrix::PerPair(
        (0..n_states)
            .map(|s| vec![per_state[s].clone(); n_actions])
            .collect(),
    );
    let table = |rng: &mut R, lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(lo..hi)).collect())
            .collect()
    };
    let nominal = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| random_simplex(rng, n_states, 0.2))
                .collect()
        })
        .collect();
    let reward = table(rng, 0.0, 1.0);
    let cost = table(rng, 0.0, 1.0);
    let radius = table(rng, 0.0, max_radius.max(f64::MIN_POSITIVE));
    DiscreteRCMDP {
        n_states,
        n_actions,
        nominal,
        reward,
        cost,
        gamma: rng.gen_range(0.5..0.95),
        rho0: random_simplex(rng, n_states, 0.0),
        radius,
        cost_matrix,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_mdps_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in GroundCost::ALL {
            for _ in 0..20 {
                random_rcmdp(&mut rng, 4, 2, kind, 0.3).validate().unwrap();
            }
        }
    }

    #[test]
    fn percent_sq_instances_have_forbidden_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let any_inf = (0..50).any(|_| {
            random_inner_problem(&mut rng, GroundCost::PercentSq)
                .cost
                .iter()
                .flatten()
                .any(|d| d.is_infinite())
        });
        assert!(any_inf);
    }

    #[test]
    fn inner_problem_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_inner_problem(&mut rng, GroundCost::PercentSq);
        let back: InnerProblem = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
    }
}
