use nalgebra::{DMatrix, DVector};
use otp_core::robust_bellman::instances::{random_inner_problem, random_rcmdp, GroundCost};
use otp_core::robust_bellman::{
    dual_objective, initial_value, robust_bellman_apply, robust_policy_evaluation,
    solve_rcmdp_bruteforce, worst_case_expectation_dual, worst_case_expectation_primal,
    ApplyOptions, CostMatrix, Direction, DiscreteRCMDP, EvalOptions, InnerSolver, QKind, QTable,
    RobustError, TabularPolicy,
};
use otp_core::transport::optimal_coupling_matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: usize = 50;

/// All points of the probability simplex with coordinates in multiples of 1/GRID.
fn simplex_grid(n: usize) -> Vec<Vec<f64>> {
    fn rec(n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if n == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / GRID as f64).collect());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(n - 1, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, GRID, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search over grid distributions whose transport cost from `p_hat`
/// is within `eps`. Returns the best value, or `None` if no grid point qualifies.
fn grid_oracle(p_hat: &[f64], values: &[f64], cost: &[Vec<f64>], eps: f64, dir: Direction) -> Option<f64> {
    let mut best: Option<f64> = None;
    for q in simplex_grid(values.len()) {
        let Ok(c) = optimal_coupling_matrix(p_hat, &q, cost) else {
            continue;
        };
        if c.cost > eps + 1e-12 {
            continue;
        }
        let v: f64 = q.iter().zip(values).map(|(p, x)| p * x).sum();
        best = Some(match (best, dir) {
            (None, _) => v,
            (Some(b), Direction::Sup) => b.max(v),
            (Some(b), Direction::Inf) => b.min(v),
        });
    }
    best
}

fn on_grid_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    for _ in 0..GRID {
        counts[rng.gen_range(0..n)] += 1;
    }
    counts.iter().map(|&k| k as f64 / GRID as f64).collect()
}

fn range(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo
}

fn line_costs(pts: &[f64], p: i32) -> Vec<Vec<f64>> {
    pts.iter()
        .map(|a| pts.iter().map(|b| (a - b).abs().powi(p)).collect())
        .collect()
}

fn tv_costs(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect()
}

#[test]
fn primal_matches_grid_search_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for inst in 0..8 {
        let n = 4;
        let p_hat = on_grid_probs(&mut rng, n);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cost = if inst % 2 == 0 {
            tv_costs(n)
        } else {
            let pts: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(0.0..0.5)).collect();
            line_costs(&pts, 1)
        };
        let eps = rng.gen_range(0.02..0.6);
        for dir in [Direction::Sup, Direction::Inf] {
            let lp = worst_case_expectation_primal(&p_hat, &values, &cost, eps, dir).unwrap().value;
            let grid = grid_oracle(&p_hat, &values, &cost, eps, dir).expect("p_hat is on the grid");
            let slack = match dir {
                Direction::Sup => lp - grid,
                Direction::Inf => grid - lp,
            };
            assert!(slack >= -1e-9, "grid point beats the LP: lp {lp} grid {grid}");
            assert!(slack <= 0.02 * range(&values), "lp {lp} grid {grid}");
        }
    }
}

#[test]
fn small_tv_instance_apply_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (ns, na) = (3, 2);
    let nominal: Vec<Vec<Vec<f64>>> = (0..ns)
        .map(|_| (0..na).map(|_| on_grid_probs(&mut rng, ns)).collect())
        .collect();
    let mdp = DiscreteRCMDP {
        n_states: ns,
        n_actions: na,
        nominal,
        reward: vec![vec![0.2, 0.5], vec![1.0, 0.0], vec![0.3, 0.7]],
        cost: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]],
        gamma: 0.9,
        rho0: vec![1.0, 0.0, 0.0],
        radius: vec![vec![0.1; na]; ns],
        cost_matrix: CostMatrix::Shared(tv_costs(ns)),
    };
    let pi = TabularPolicy::new(vec![vec![0.3, 0.7], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
    for kind in [QKind::Reward, QKind::Cost] {
        let q = QTable {
            values: (0..ns).map(|_| (0..na).map(|_| rng.gen_range(0.0..3.0)).collect()).collect(),
            kind,
        };
        let out = robust_bellman_apply(&mdp, &pi, &q, ApplyOptions::default()).unwrap();
        let v = q.state_values(&pi);
        let imm = if kind == QKind::Reward { &mdp.reward } else { &mdp.cost };
        for s in 0..ns {
            for a in 0..na {
                let grid = grid_oracle(&mdp.nominal[s][a], &v, &tv_costs(ns), 0.1, kind.direction()).unwrap();
                let expect = imm[s][a] + mdp.gamma * grid;
                assert!(
                    (out.values[s][a] - expect).abs() <= mdp.gamma * 0.02 * range(&v) + 1e-12,
                    "{kind:?} ({s},{a}): {} vs grid {expect}",
                    out.values[s][a]
                );
            }
        }
    }
}

#[test]
fn primal_and_dual_agree_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for kind in GroundCost::ALL {
        for _ in 0..150 {
            let p = random_inner_problem(&mut rng, kind);
            for dir in [Direction::Sup, Direction::Inf] {
                let primal = worst_case_expectation_primal(&p.p_hat, &p.values, &p.cost, p.eps, dir).unwrap();
                let dual = worst_case_expectation_dual(&p.p_hat, &p.values, &p.cost, p.eps, dir).unwrap();
                assert!(
                    (primal.value - dual.value).abs() <= 1e-6,
                    "{kind:?} {dir:?}: primal {} dual {} ({p:?})",
                    primal.value,
                    dual.value
                );
            }
        }
    }
}

#[test]
fn worst_distribution_is_inside_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for kind in GroundCost::ALL {
        for _ in 0..60 {
            let p = random_inner_problem(&mut rng, kind);
            for dir in [Direction::Sup, Direction::Inf] {
                let sol = worst_case_expectation_primal(&p.p_hat, &p.values, &p.cost, p.eps, dir).unwrap();
                assert!((sol.worst_dist.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                let mut q = sol.worst_dist.clone();
                q.iter_mut().for_each(|x| *x = x.max(0.0));
                let t: f64 = q.iter().sum();
                q.iter_mut().for_each(|x| *x /= t);
                let otc = optimal_coupling_matrix(&p.p_hat, &q, &p.cost).unwrap().cost;
                assert!(otc <= p.eps + 1e-8, "otc {otc} > eps {}", p.eps);
                assert!(sol.budget_used <= p.eps + 1e-9);
            }
        }
    }
}

#[test]
fn slack_budget_means_zero_multiplier() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut slack_cases = 0;
    for kind in GroundCost::ALL {
        for _ in 0..100 {
            let mut p = random_inner_problem(&mut rng, kind);
            // Large radii make the budget slack more often.
            p.eps *= rng.gen_range(1.0..20.0);
            for dir in [Direction::Sup, Direction::Inf] {
                let primal = worst_case_expectation_primal(&p.p_hat, &p.values, &p.cost, p.eps, dir).unwrap();
                if primal.budget_used < p.eps - 1e-7 {
                    slack_cases += 1;
                    let dual = worst_case_expectation_dual(&p.p_hat, &p.values, &p.cost, p.eps, dir).unwrap();
                    assert!(dual.lambda <= 1e-6, "lambda {} with slack budget", dual.lambda);
                    assert!(primal.budget_multiplier <= 1e-9);
                }
            }
        }
    }
    assert!(slack_cases > 50, "only {slack_cases} slack cases");
}

#[test]
fn dual_objective_is_convex_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for kind in GroundCost::ALL {
        for _ in 0..25 {
            let p = random_inner_problem(&mut rng, kind);
            for dir in [Direction::Sup, Direction::Inf] {
                // Orient so the function should be convex.
                let sign = if dir == Direction::Sup { 1.0 } else { -1.0 };
                let h = |l: f64| sign * dual_objective(&p.p_hat, &p.values, &p.cost, p.eps, dir, l);
                for _ in 0..50 {
                    let (a, b) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
                    let t = rng.gen::<f64>();
                    let mid = h(t * a + (1.0 - t) * b);
                    let chord = t * h(a) + (1.0 - t) * h(b);
                    assert!(mid <= chord + 1e-9 * (1.0 + chord.abs()), "{mid} > {chord}");
                }
            }
        }
    }
}

#[test]
fn dual_objective_grows_linearly_for_large_lambda() {
    // Zero only on the diagonal: beyond the bracket the inner max stays put
    // and the objective is E_p_hat[V] + lambda * eps.
    let p_hat = [0.2, 0.5, 0.3];
    let values = [1.0, -0.5, 2.0];
    let cost = line_costs(&[0.0, 1.0, 2.5], 1);
    let eps = 0.3;
    let mean: f64 = p_hat.iter().zip(&values).map(|(p, v)| p * v).sum();
    for l in [10.0, 100.0, 1000.0] {
        let h = dual_objective(&p_hat, &values, &cost, eps, Direction::Sup, l);
        assert!((h - (mean + l * eps)).abs() < 1e-9);
    }
}

#[test]
fn values_are_monotone_in_the_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let grid = [0.0, 0.02, 0.05, 0.1, 0.2, 0.5];
    for kind in GroundCost::ALL {
        for _ in 0..25 {
            let p = random_inner_problem(&mut rng, kind);
            let scale = p.eps.max(0.1);
            for dir in [Direction::Sup, Direction::Inf] {
                let vals: Vec<f64> = grid
                    .iter()
                    .map(|e| {
                        worst_case_expectation_primal(&p.p_hat, &p.values, &p.cost, e * scale, dir)
                            .unwrap()
                            .value
                    })
                    .collect();
                for w in vals.windows(2) {
                    match dir {
                        Direction::Sup => assert!(w[1] >= w[0] - 1e-9),
                        Direction::Inf => assert!(w[1] <= w[0] + 1e-9),
                    }
                }
            }
        }
    }
}

#[test]
fn operator_is_a_gamma_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for kind in GroundCost::ALL {
        for _ in 0..10 {
            let mdp = random_rcmdp(&mut rng, 4, 2, kind, 0.5);
            let pi = TabularPolicy::new(
                (0..4).map(|_| {
                    let x = rng.gen::<f64>();
                    vec![x, 1.0 - x]
                }).collect(),
            )
            .unwrap();
            for qk in [QKind::Reward, QKind::Cost] {
                let rand_q = |rng: &mut ChaCha8Rng| QTable {
                    values: (0..4).map(|_| (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect(),
                    kind: qk,
                };
                let (q1, q2) = (rand_q(&mut rng), rand_q(&mut rng));
                let t1 = robust_bellman_apply(&mdp, &pi, &q1, ApplyOptions::default()).unwrap();
                let t2 = robust_bellman_apply(&mdp, &pi, &q2, ApplyOptions::default()).unwrap();
                assert!(t1.sup_distance(&t2) <= mdp.gamma * q1.sup_distance(&q2) + 1e-9);
            }
        }
    }
}

#[test]
fn primal_and_dual_operators_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for kind in GroundCost::ALL {
        let mdp = random_rcmdp(&mut rng, 4, 2, kind, 0.4);
        let pi = TabularPolicy::uniform(4, 2);
        for qk in [QKind::Reward, QKind::Cost] {
            let q = QTable {
                values: (0..4).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
                kind: qk,
            };
            let a = robust_bellman_apply(&mdp, &pi, &q, ApplyOptions::with_solver(InnerSolver::Primal)).unwrap();
            let b = robust_bellman_apply(&mdp, &pi, &q, ApplyOptions::with_solver(InnerSolver::Dual)).unwrap();
            assert!(a.sup_distance(&b) <= 1e-6);
        }
    }
}

/// `Q = (I - gamma P Pi)^{-1} r` over state-action pairs.
fn linear_solve_q(mdp: &DiscreteRCMDP, pi: &TabularPolicy, kind: QKind) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut m = DMatrix::<f64>::identity(n, n);
    let imm = if kind == QKind::Reward { &mdp.reward } else { &mdp.cost };
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            rhs[s * na + a] = imm[s][a];
            for s2 in 0..ns {
                for a2 in 0..na {
                    m[(s * na + a, s2 * na + a2)] -= mdp.gamma * mdp.nominal[s][a][s2] * pi.prob(s2, a2);
                }
            }
        }
    }
    let x = m.lu().solve(&rhs).expect("nonsingular");
    (0..ns).map(|s| (0..na).map(|a| x[s * na + a]).collect()).collect()
}

#[test]
fn zero_radius_evaluation_matches_linear_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for kind in GroundCost::ALL {
        for _ in 0..5 {
            let mdp = random_rcmdp(&mut rng, 4, 2, kind, 0.3).with_uniform_radius(0.0);
            let pi = TabularPolicy::uniform(4, 2);
            for qk in [QKind::Reward, QKind::Cost] {
                let q = robust_policy_evaluation(&mdp, &pi, qk, EvalOptions::default()).unwrap();
                let exact = linear_solve_q(&mdp, &pi, qk);
                for (r1, r2) in q.values.iter().zip(&exact) {
                    for (x, y) in r1.iter().zip(r2) {
                        assert!((x - y).abs() <= 1e-7, "{x} vs {y}");
                    }
                }
            }
        }
    }
}

#[test]
fn robust_values_bracket_the_nominal_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for kind in GroundCost::ALL {
        let mdp = random_rcmdp(&mut rng, 3, 2, kind, 0.5);
        let nominal = mdp.with_uniform_radius(0.0);
        let pi = TabularPolicy::uniform(3, 2);
        let opts = EvalOptions::default();
        let r = robust_policy_evaluation(&mdp, &pi, QKind::Reward, opts).unwrap();
        let r0 = robust_policy_evaluation(&nominal, &pi, QKind::Reward, opts).unwrap();
        let c = robust_policy_evaluation(&mdp, &pi, QKind::Cost, opts).unwrap();
        let c0 = robust_policy_evaluation(&nominal, &pi, QKind::Cost, opts).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert!(r.values[s][a] <= r0.values[s][a] + 1e-9);
                assert!(c.values[s][a] >= c0.values[s][a] - 1e-9);
            }
        }
    }
}

fn three_state_chain(eps: f64) -> DiscreteRCMDP {
    // Action 0 stays put (safe, little reward); action 1 moves right towards a
    // rewarding but costly state. Moves cost |i - j| in the ground metric.
    let slip = 0.1;
    let nominal = vec![
        vec![vec![1.0 - slip, slip, 0.0], vec![slip, 1.0 - slip, 0.0]],
        vec![vec![slip, 1.0 - slip, 0.0], vec![0.0, slip, 1.0 - slip]],
        vec![vec![0.0, slip, 1.0 - slip], vec![0.0, slip, 1.0 - slip]],
    ];
    DiscreteRCMDP {
        n_states: 3,
        n_actions: 2,
        nominal,
        reward: vec![vec![0.1, 0.0], vec![0.2, 0.3], vec![1.0, 1.0]],
        cost: vec![vec![0.0, 0.0], vec![0.0, 0.5], vec![1.0, 1.0]],
        gamma: 0.9,
        rho0: vec![1.0, 0.0, 0.0],
        radius: vec![vec![eps; 2]; 3],
        cost_matrix: CostMatrix::Shared(line_costs(&[0.0, 1.0, 2.0], 1)),
    }
}

#[test]
fn feasible_sets_shrink_as_the_radius_grows() {
    let budget = 3.0;
    let mut prev: Option<Vec<Vec<usize>>> = None;
    for eps in [0.0, 0.05, 0.1, 0.2] {
        let res = solve_rcmdp_bruteforce(&three_state_chain(eps), budget, EvalOptions::default()).unwrap();
        let set = res.feasible_set();
        if let Some(p) = &prev {
            assert!(set.iter().all(|x| p.contains(x)), "eps {eps}: {set:?} not within {p:?}");
        }
        prev = Some(set);
    }
}

#[test]
fn brute_force_limits() {
    let mdp = three_state_chain(0.1);
    let unconstrained = solve_rcmdp_bruteforce(&mdp, f64::INFINITY, EvalOptions::default()).unwrap();
    let best_jr = unconstrained
        .records
        .iter()
        .map(|r| r.j_reward)
        .fold(f64::NEG_INFINITY, f64::max);
    let (pi, jr, _) = unconstrained.best.clone().unwrap();
    assert_eq!(jr, best_jr);
    let q = robust_policy_evaluation(&mdp, &pi, QKind::Reward, EvalOptions::default()).unwrap();
    assert!((initial_value(&mdp, &pi, &q) - jr).abs() < 1e-12);

    // Every policy eventually drifts into the costly state under slip.
    let none = solve_rcmdp_bruteforce(&mdp, 0.0, EvalOptions::default()).unwrap();
    assert!(none.is_infeasible());

    let big = random_rcmdp(&mut ChaCha8Rng::seed_from_u64(1), 5, 2, GroundCost::Tv, 0.1);
    assert!(matches!(
        solve_rcmdp_bruteforce(&big, 1.0, EvalOptions::default()),
        Err(RobustError::TooLarge { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_radius_is_the_nominal_operator(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = GroundCost::ALL[rng.gen_range(0..4)];
        let mdp = random_rcmdp(&mut rng, 4, 2, kind, 0.3).with_uniform_radius(0.0);
        let pi = TabularPolicy::uniform(4, 2);
        let q = QTable {
            values: (0..4).map(|_| (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect(),
            kind: if rng.gen() { QKind::Reward } else { QKind::Cost },
        };
        let out = robust_bellman_apply(&mdp, &pi, &q, ApplyOptions::default()).unwrap();
        let v = q.state_values(&pi);
        let imm = if q.kind == QKind::Reward { &mdp.reward } else { &mdp.cost };
        for s in 0..4 {
            for a in 0..2 {
                let ev: f64 = mdp.nominal[s][a].iter().zip(&v).map(|(p, x)| p * x).sum();
                prop_assert!((out.values[s][a] - (imm[s][a] + mdp.gamma * ev)).abs() <= 1e-12);
            }
        }
    }
}
