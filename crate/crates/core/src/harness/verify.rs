//! Seeded property suites over the exact operators, the networks and the
//! perturbation algebra. Instance `i` of check family `tag` is drawn from its
//! own ChaCha stream, so the generated instances depend only on the seed and
//! never on evaluation order or thread count.

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{create_dir, write_csv, write_file, HarnessError, RunManifest, VERIFY_SCHEMA};
use crate::nn::gradcheck::{check, check_mlp, FD_STEP, KINK_TOL, SMOOTH_TOL};
use crate::nn::{GaussianPolicy, Mlp, MlpSpec};
use crate::otp::{virtual_states, OtpConfig, PerturbKind, PerturbationNet};
use crate::par::{self, Execution};
use crate::robust_bellman::instances::{random_inner_problem, random_rcmdp, GroundCost};
use crate::robust_bellman::{
    robust_bellman_apply, worst_case_expectation_dual, worst_case_expectation_primal, ApplyOptions, Direction,
    DiscreteRCMDP, QKind, QTable, TabularPolicy,
};
use crate::safe_rl::{bellman_targets, normal_noise, Agent, Batch, PolicyValue, TrainConfig, Transition};
use crate::transport::{eval_cost, StateVec, TransportCost};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Duality,
    Contraction,
    Gradients,
    OtpIdentities,
    All,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Contraction => "contraction",
            Suite::Gradients => "gradients",
            Suite::OtpIdentities => "otp-identities",
            Suite::All => "all",
        }
    }

    fn members(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Duality, Suite::Contraction, Suite::Gradients, Suite::OtpIdentities],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "duality" => Suite::Duality,
            "contraction" => Suite::Contraction,
            "gradients" => Suite::Gradients,
            "otp-identities" | "otp_identities" => Suite::OtpIdentities,
            "all" => Suite::All,
            other => {
                return Err(HarnessError::Usage(format!(
                    "unknown suite {other:?} (expected duality, contraction, gradients, otp-identities or all)"
                )))
            }
        })
    }
}

/// One evaluated check. A check passes when `value <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub schema: &'static str,
    pub manifest: String,
    pub suite: &'static str,
    pub check: String,
    pub instance: usize,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
    /// `(file stem, replay document)` for every failed check.
    pub failures: Vec<(String, serde_json::Value)>,
    pub manifest: Option<RunManifest>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    /// Rows whose check name starts with `prefix`.
    pub fn family<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a CheckRow> + 'a {
        self.rows.iter().filter(move |r| r.check.starts_with(prefix))
    }

    /// Largest `value` among checks whose name starts with `prefix`.
    pub fn worst(&self, prefix: &str) -> f64 {
        self.family(prefix).map(|r| r.value).fold(0.0, f64::max)
    }
}

struct Outcome {
    check: String,
    value: f64,
    tolerance: f64,
    /// Everything needed to rebuild the instance; kept only on failure.
    replay: serde_json::Value,
}

impl Outcome {
    fn new(check: impl Into<String>, value: f64, tolerance: f64, replay: impl FnOnce() -> serde_json::Value) -> Self {
        let passed = value <= tolerance;
        Outcome {
            check: check.into(),
            value,
            tolerance,
            replay: if passed { serde_json::Value::Null } else { replay() },
        }
    }

    /// Exact checks: pass iff `equal`; `value` reports the discrepancy.
    fn exact(check: impl Into<String>, equal: bool, value: f64, replay: impl FnOnce() -> serde_json::Value) -> Self {
        Outcome::new(check, if equal { 0.0 } else { value.max(f64::MIN_POSITIVE) }, 0.0, replay)
    }
}

fn instance_rng(seed: u64, tag: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) | i as u64);
    rng
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::Sup => "sup",
        Direction::Inf => "inf",
    }
}

fn kind_name(k: QKind) -> &'static str {
    match k {
        QKind::Reward => "reward",
        QKind::Cost => "cost",
    }
}

fn duality(seed: u64, n: usize, exec: Execution) -> Vec<Outcome> {
    let mut out = Vec::new();
    for (t, kind) in GroundCost::ALL.into_iter().enumerate() {
        let cells = par::map_indexed(n, exec, |i| {
            let p = random_inner_problem(&mut instance_rng(seed, 100 + t as u64, i), kind);
            [Direction::Sup, Direction::Inf].map(|dir| {
                let primal = worst_case_expectation_primal(&p.p_hat, &p.values, &p.cost, p.eps, dir);
                let dual = worst_case_expectation_dual(&p.p_hat, &p.values, &p.cost, p.eps, dir);
                let gap = match (&primal, &dual) {
                    (Ok(a), Ok(b)) => (a.value - b.value).abs(),
                    _ => f64::INFINITY,
                };
                Outcome::new(format!("duality_{}_{}", kind.name(), dir_name(dir)), gap, 1e-5, || {
                    json!({
                        "problem": p,
                        "direction": dir_name(dir),
                        "primal": primal.as_ref().map(|s| s.value).map_err(|e| e.to_string()),
                        "dual": dual.as_ref().map(|s| s.value).map_err(|e| e.to_string()),
                    })
                })
            })
        });
        out.extend(cells.into_iter().flatten());
    }
    out
}

fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularPolicy {
    TabularPolicy::new(
        (0..ns)
            .map(|_| {
                let w: Vec<f64> = (0..na).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| x / z).collect()
            })
            .collect(),
    )
    .expect("normalized rows")
}

fn random_q(rng: &mut ChaCha8Rng, ns: usize, na: usize, kind: QKind, scale: f64) -> QTable {
    QTable {
        values: (0..ns)
            .map(|_| (0..na).map(|_| rng.gen_range(-scale..scale)).collect())
            .collect(),
        kind,
    }
}

/// `r(s, a) + gamma * sum_s' p_hat(s'|s, a) V(s')` written out directly.
fn nominal_apply(mdp: &DiscreteRCMDP, policy: &TabularPolicy, q: &QTable) -> QTable {
    let v = q.state_values(policy);
    let immediate = match q.kind {
        QKind::Reward => &mdp.reward,
        QKind::Cost => &mdp.cost,
    };
    let values = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let ev: f64 = mdp.nominal[s][a].iter().zip(&v).map(|(p, x)| p * x).sum();
                    immediate[s][a] + mdp.gamma * ev
                })
                .collect()
        })
        .collect();
    QTable { values, kind: q.kind }
}

fn contraction(seed: u64, n: usize, exec: Execution) -> Vec<Outcome> {
    const NS: usize = 4;
    const NA: usize = 2;
    let apply = |mdp: &DiscreteRCMDP, pi: &TabularPolicy, q: &QTable| {
        robust_bellman_apply(mdp, pi, q, ApplyOptions { exec: Execution::Sequential, ..ApplyOptions::default() })
    };
    let cells = par::map_indexed(n, exec, |i| {
        let mut out = Vec::new();
        let ground = GroundCost::ALL[i % GroundCost::ALL.len()];
        for (t, qk) in [QKind::Reward, QKind::Cost].into_iter().enumerate() {
            // Zero radius collapses to the nominal operator.
            let mut rng = instance_rng(seed, 200 + t as u64, i);
            let mdp = random_rcmdp(&mut rng, NS, NA, ground, 0.5).with_uniform_radius(0.0);
            let pi = random_policy(&mut rng, NS, NA);
            let q = random_q(&mut rng, NS, NA, qk, 5.0);
            let gap = apply(&mdp, &pi, &q).map(|tq| tq.sup_distance(&nominal_apply(&mdp, &pi, &q)));
            out.push(Outcome::new(
                format!("zero_radius_{}", kind_name(qk)),
                gap.clone().unwrap_or(f64::INFINITY),
                1e-12,
                || json!({"mdp": mdp.to_json(), "policy": pi.probs(), "q": q.values, "error": gap.err().map(|e| e.to_string())}),
            ));

            // gamma-contraction in the sup norm.
            let mut rng = instance_rng(seed, 210 + t as u64, i);
            let mdp = random_rcmdp(&mut rng, NS, NA, ground, 0.5);
            let pi = random_policy(&mut rng, NS, NA);
            let (q1, q2) = (random_q(&mut rng, NS, NA, qk, 5.0), random_q(&mut rng, NS, NA, qk, 5.0));
            let excess = match (apply(&mdp, &pi, &q1), apply(&mdp, &pi, &q2)) {
                (Ok(a), Ok(b)) => a.sup_distance(&b) - mdp.gamma * q1.sup_distance(&q2),
                _ => f64::INFINITY,
            };
            out.push(Outcome::new(format!("contraction_{}", kind_name(qk)), excess, 1e-9, || {
                json!({"mdp": mdp.to_json(), "policy": pi.probs(), "q1": q1.values, "q2": q2.values})
            }));

            // Monotone in the radius: rewards fall, costs rise.
            let mut rng = instance_rng(seed, 220 + t as u64, i);
            let mdp = random_rcmdp(&mut rng, NS, NA, ground, 0.5);
            let pi = random_policy(&mut rng, NS, NA);
            let q = random_q(&mut rng, NS, NA, qk, 5.0);
            let grid = [0.0, 0.02, 0.05, 0.1, 0.2, 0.5];
            let tables: Result<Vec<QTable>, _> = grid
                .iter()
                .map(|&e| apply(&mdp.with_uniform_radius(e), &pi, &q))
                .collect();
            let violation = match &tables {
                Ok(ts) => ts
                    .windows(2)
                    .flat_map(|w| {
                        w[0].values.iter().flatten().zip(w[1].values.iter().flatten()).map(|(a, b)| match qk {
                            QKind::Reward => b - a,
                            QKind::Cost => a - b,
                        })
                    })
                    .fold(0.0, f64::max),
                Err(_) => f64::INFINITY,
            };
            out.push(Outcome::new(format!("eps_monotone_{}", kind_name(qk)), violation, 1e-8, || {
                json!({"mdp": mdp.to_json(), "policy": pi.probs(), "q": q.values, "radii": grid})
            }));
        }
        out
    });
    cells.into_iter().flatten().collect()
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

fn randomize(net: &mut Mlp, rng: &mut ChaCha8Rng, scale: f64) {
    net.params_mut().iter_mut().for_each(|p| *p = rng.gen_range(-scale..scale));
}

fn kink_tol(nets: &[&Mlp]) -> f64 {
    let near = nets
        .iter()
        .filter_map(|n| n.min_abs_elu_preactivation())
        .any(|z| z < 1e3 * FD_STEP);
    if near {
        KINK_TOL
    } else {
        SMOOTH_TOL
    }
}

/// Architectures used by the learner: critics over `(s, a)`, the policy
/// trunk, the perturbation network, plus the composite maps built on them.
fn gradients(seed: u64, n: usize, exec: Execution) -> Vec<Outcome> {
    let (ns, na) = (4, 2);
    let specs = [
        ("mlp_critic", MlpSpec::new(&[ns + na, 32, 32, 1], true)),
        ("mlp_policy", MlpSpec::new(&[ns, 32, 32, 2 * na], true)),
        ("mlp_perturbation", MlpSpec::new(&[2 * ns + na, 16, 16, ns], false)),
        ("mlp_linear", MlpSpec::new(&[3, 5], false)),
    ];
    let mut out = Vec::new();
    for (t, (name, spec)) in specs.iter().enumerate() {
        out.extend(par::map_indexed(n, exec, |i| {
            let mut rng = instance_rng(seed, 300 + t as u64, i);
            let mut net = Mlp::zeros(spec.clone()).expect("valid spec");
            randomize(&mut net, &mut rng, 0.6);
            let x = rand_matrix(&mut rng, 3, spec.input_dim(), 1.5);
            let up = rand_matrix(&mut rng, 3, spec.output_dim(), 1.0);
            match check_mlp(&mut net, x.view(), up.view(), FD_STEP) {
                Ok((res, tol)) => Outcome::new(*name, res.max_rel_err, tol, || {
                    json!({"spec": spec.sizes, "layer_norm": spec.layer_norm, "params": net.params(), "x": x.as_slice(), "upstream": up.as_slice(), "worst_index": res.worst_index})
                }),
                Err(e) => Outcome::new(*name, f64::INFINITY, 0.0, || json!({"error": e.to_string()})),
            }
        }));
    }

    // Reparameterized Gaussian policy: parameters and states.
    out.extend(par::map_indexed(n, exec, |i| {
        let mut rng = instance_rng(seed, 310, i);
        let mut pol = GaussianPolicy::new(ns, na, &[16, 16], true, &mut rng).expect("valid policy");
        randomize(pol.net_mut(), &mut rng, 0.5);
        let states = rand_matrix(&mut rng, 3, ns, 1.0);
        let noise = rand_matrix(&mut rng, 3, na, 1.5);
        let da = rand_matrix(&mut rng, 3, na, 1.0);
        let dl = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        pol.sample(states.view(), noise.view()).expect("shapes match");
        let tol = kink_tol(&[pol.net()]);
        let (grads, dstates) = pol.backward(da.view(), dl.view()).expect("after sample");
        let objective = |p: &GaussianPolicy, st: &Array2<f64>| {
            let o = p.sample_detached(st.view(), noise.view()).expect("shapes match");
            (&o.actions * &da).sum() + (&o.log_probs * &dl).sum()
        };
        let params = pol.net().params().to_vec();
        let mut probe = pol.clone();
        let r1 = check(&params, &grads, FD_STEP, |theta| {
            probe.net_mut().set_params(theta).expect("same length");
            objective(&probe, &states)
        });
        let flat: Vec<f64> = states.iter().copied().collect();
        let r2 = check(&flat, dstates.as_slice().expect("standard layout"), FD_STEP, |x| {
            objective(&pol, &Array2::from_shape_vec((3, ns), x.to_vec()).expect("shape"))
        });
        let res = r1.merge(r2);
        Outcome::new("gaussian_policy", res.max_rel_err, tol, || {
            json!({"params": params, "states": states.as_slice(), "noise": noise.as_slice()})
        })
    }));

    // V(x) = Q(x, pi(x)) and the perturbation-space gradient built on it.
    out.extend(par::map_indexed(n, exec, |i| {
        let mut rng = instance_rng(seed, 320, i);
        let mut critic = Mlp::zeros(MlpSpec::new(&[ns + na, 16, 16, 1], true)).expect("valid spec");
        randomize(&mut critic, &mut rng, 0.5);
        let mut pol = GaussianPolicy::new(ns, na, &[16, 16], true, &mut rng).expect("valid policy");
        randomize(pol.net_mut(), &mut rng, 0.5);
        let s = rand_matrix(&mut rng, 3, ns, 1.0);
        let a = rand_matrix(&mut rng, 3, na, 1.0);
        let s_hat = rand_matrix(&mut rng, 3, ns, 1.0);
        let noise = rand_matrix(&mut rng, 3, na, 1.0);
        let mut pnet = PerturbationNet::new(PerturbKind::Reward, ns, na, OtpConfig::default(), &mut rng)
            .expect("valid perturbation net");
        randomize(pnet.net_mut(), &mut rng, 0.5);

        let mut vf = PolicyValue {
            critic: &mut critic,
            policy: &mut pol,
            noise: noise.clone(),
        };
        let (grad, delta) = pnet.value_gradient(s.view(), a.view(), s_hat.view(), &mut vf).expect("finite");
        let (_, dv) = crate::otp::ValueFn::value_and_grad(&mut vf, s_hat.view()).expect("finite");
        let tol = kink_tol(&[&critic, pol.net()]);
        let value_sum = |x: &Array2<f64>| {
            let act = pol.sample_detached(x.view(), noise.view()).expect("shape").actions;
            let mut sa = Array2::zeros((x.nrows(), ns + na));
            sa.slice_mut(ndarray::s![.., ..ns]).assign(x);
            sa.slice_mut(ndarray::s![.., ns..]).assign(&act);
            critic.predict(sa.view()).expect("shape").sum()
        };
        let flat: Vec<f64> = s_hat.iter().copied().collect();
        let r1 = check(&flat, dv.as_slice().expect("standard layout"), FD_STEP, |x| {
            value_sum(&Array2::from_shape_vec((3, ns), x.to_vec()).expect("shape"))
        });
        let dflat: Vec<f64> = delta.iter().copied().collect();
        let r2 = check(&dflat, grad.as_slice().expect("standard layout"), FD_STEP, |d| {
            let d = Array2::from_shape_vec((3, ns), d.to_vec()).expect("shape");
            value_sum(&virtual_states(s.view(), s_hat.view(), &d)) / 3.0
        });
        let res = r1.merge(r2);
        Outcome::new("policy_value", res.max_rel_err, tol, || {
            json!({"s": s.as_slice(), "a": a.as_slice(), "s_hat": s_hat.as_slice(), "noise": noise.as_slice()})
        })
    }));
    out
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, n: usize, m: usize) -> Batch {
    let items: Vec<Transition> = (0..b)
        .map(|_| Transition {
            s: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            a: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            r: rng.gen(),
            c: f64::from(rng.gen_bool(0.3)),
            s_next: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            terminal: rng.gen_bool(0.1),
        })
        .collect();
    Batch::from_transitions(&items.iter().collect::<Vec<_>>())
}

/// Samples per cost-identity instance.
const IDENTITY_SAMPLES: usize = 100;

fn otp_identities(seed: u64, n: usize, exec: Execution) -> Vec<Outcome> {
    let cells = par::map_indexed(n, exec, |i| {
        let mut out = Vec::new();
        let dim = 1 + i % 6;
        let m = 2;

        // Transport cost of the virtual state equals (1/n)|delta|^2.
        let mut rng = instance_rng(seed, 400, i);
        let mut p = PerturbationNet::new(PerturbKind::Cost, dim, m, OtpConfig::default(), &mut rng)
            .expect("valid perturbation net");
        randomize(p.net_mut(), &mut rng, 0.5);
        let s = rand_matrix(&mut rng, IDENTITY_SAMPLES, dim, 2.0);
        let a = rand_matrix(&mut rng, IDENTITY_SAMPLES, m, 1.0);
        let sh = rand_matrix(&mut rng, IDENTITY_SAMPLES, dim, 2.0);
        let (st, d) = p.apply_batch(s.view(), a.view(), sh.view()).expect("shapes match");
        let mut worst: f64 = 0.0;
        for k in 0..IDENTITY_SAMPLES {
            let cost = TransportCost::percent_sq(StateVec::new(s.row(k).to_vec()).expect("finite"));
            let via = eval_cost(&cost, &sh.row(k).to_vec(), &st.row(k).to_vec()).unwrap_or(f64::INFINITY);
            let direct = d.row(k).dot(&d.row(k)) / dim as f64;
            worst = worst.max((via - direct).abs());
        }
        out.push(Outcome::new("cost_identity", worst, 1e-12, || {
            json!({"params": p.net().params(), "s": s.as_slice(), "a": a.as_slice(), "s_hat": sh.as_slice()})
        }));

        // Zero-initialized perturbations are the identity map, bit for bit.
        let mut rng = instance_rng(seed, 410, i);
        let p = PerturbationNet::new(PerturbKind::Reward, dim, m, OtpConfig::default(), &mut rng)
            .expect("valid perturbation net");
        let s = rand_matrix(&mut rng, 16, dim, 2.0);
        let a = rand_matrix(&mut rng, 16, m, 1.0);
        let sh = rand_matrix(&mut rng, 16, dim, 2.0);
        let (st, d) = p.apply_batch(s.view(), a.view(), sh.view()).expect("shapes match");
        let gap = (&st - &sh).iter().chain(d.iter()).fold(0.0f64, |acc, x| acc.max(x.abs()));
        out.push(Outcome::exact("zero_init_identity", st == sh && d.iter().all(|x| *x == 0.0), gap, || {
            json!({"s": s.as_slice(), "a": a.as_slice(), "s_hat": sh.as_slice()})
        }));

        // ... so robust and plain Bellman targets coincide at initialization.
        let mut rng = instance_rng(seed, 420, i);
        let cfg = TrainConfig {
            critic_hidden: vec![16, 16],
            policy_hidden: vec![16, 16],
            otp_hidden: vec![8],
            ..TrainConfig::default()
        };
        let agent = Agent::new(dim, m, &cfg, &mut rng).expect("valid agent");
        let batch = random_batch(&mut rng, 16, dim, m);
        let noise = vec![normal_noise(&mut rng, 16, m)];
        for kind in [PerturbKind::Reward, PerturbKind::Cost] {
            let plain = bellman_targets(kind, &batch, &agent.critics, &agent.policy, None, cfg.gamma, &noise);
            let robust = bellman_targets(
                kind,
                &batch,
                &agent.critics,
                &agent.policy,
                Some(agent.pnets.get(kind)),
                cfg.gamma,
                &noise,
            );
            let (equal, gap) = match (&plain, &robust) {
                (Ok(x), Ok(y)) => (x == y, (x - y).iter().fold(0.0f64, |acc, v| acc.max(v.abs()))),
                _ => (false, f64::INFINITY),
            };
            let name = match kind {
                PerturbKind::Reward => "zero_init_targets_reward",
                PerturbKind::Cost => "zero_init_targets_cost",
            };
            out.push(Outcome::exact(name, equal, gap, || json!({"seed": seed, "instance": i})));
        }
        out
    });
    cells.into_iter().flatten().collect()
}

fn run_suite(suite: Suite, seed: u64, n: usize, exec: Execution) -> Vec<Outcome> {
    match suite {
        Suite::Duality => duality(seed, n, exec),
        Suite::Contraction => contraction(seed, n, exec),
        Suite::Gradients => gradients(seed, n, exec),
        Suite::OtpIdentities => otp_identities(seed, n, exec),
        Suite::All => unreachable!("expanded by members()"),
    }
}

/// Runs the named suites. With `outdir`, writes `manifest.json`,
/// `checks.csv` and one `failures/<check>-<instance>.json` per failed check.
pub fn cmd_verify(
    suite: Suite,
    seed: u64,
    n_instances: usize,
    outdir: Option<&Path>,
    exec: Execution,
) -> Result<VerifyReport, HarnessError> {
    let mut manifest = outdir.map(|dir| {
        RunManifest::new(
            "verify",
            json!({"suite": suite.as_str(), "n_instances": n_instances}),
            vec![seed],
            Vec::new(),
            dir,
        )
    });
    let stamp = manifest.as_ref().map(|m| m.short_hash().to_string()).unwrap_or_default();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for member in suite.members() {
        let mut counters: std::collections::BTreeMap<String, usize> = Default::default();
        for o in run_suite(member, seed, n_instances, exec) {
            let instance = {
                let c = counters.entry(o.check.clone()).or_default();
                *c += 1;
                *c - 1
            };
            let passed = o.value <= o.tolerance;
            if !passed {
                failures.push((
                    format!("{}-{instance}", o.check),
                    json!({"suite": member.as_str(), "check": o.check, "seed": seed, "instance": instance, "value": o.value, "tolerance": o.tolerance, "replay": o.replay}),
                ));
            }
            rows.push(CheckRow {
                schema: VERIFY_SCHEMA,
                manifest: stamp.clone(),
                suite: member.as_str(),
                check: o.check,
                instance,
                value: o.value,
                tolerance: o.tolerance,
                passed,
            });
        }
    }
    if let (Some(dir), Some(m)) = (outdir, manifest.as_mut()) {
        create_dir(dir)?;
        write_csv(&dir.join("checks.csv"), &rows)?;
        if !failures.is_empty() {
            let fdir = dir.join("failures");
            create_dir(&fdir)?;
            for (stem, doc) in &failures {
                let mut doc = doc.clone();
                doc["manifest"] = json!(m.hash);
                write_file(&fdir.join(format!("{stem}.json")), serde_json::to_string_pretty(&doc)?.as_bytes())?;
            }
        }
        m.finish(dir)?;
    }
    Ok(VerifyReport {
        rows,
        failures,
        manifest,
    })
}
