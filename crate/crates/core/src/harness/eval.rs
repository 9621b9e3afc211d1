//! Perturbation sweeps of frozen policies and the aggregate metrics computed
//! from them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{create_dir, io_err, sha256_hex, write_csv, HarnessError, RunManifest, BASELINE_METHOD, EVAL_SCHEMA};
use crate::envs::{make_test_suite, rollout, TaskConfig};
use crate::nn::{Checkpoint, GaussianPolicy};
use crate::par::{self, Execution};
use crate::safe_rl::{Method, TrainConfig};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n_points: usize,
    pub rollouts: usize,
    /// Seeds the rollouts; the same rollout seeds are used for every
    /// checkpoint and test environment.
    pub seed: u64,
    /// Overrides the task's episode budget for the safe flag.
    pub budget: Option<f64>,
    pub exec: Execution,
    /// Worker cap; falls back to `OTP_NUM_WORKERS` when `None`.
    pub workers: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_points: 5,
            rollouts: 10,
            seed: 0,
            budget: None,
            exec: Execution::Parallel,
            workers: None,
        }
    }
}

/// One row of `eval.csv`. Cell rows carry per-(method, test environment,
/// seed) totals; aggregate rows carry per-method summaries. Columns that do
/// not apply to a row kind are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub schema: String,
    pub manifest: String,
    /// `cell` or `aggregate`.
    pub row: String,
    pub method: String,
    pub task: String,
    /// Name of the swept parameter.
    pub parameter: String,
    pub value: Option<f64>,
    pub seed: Option<u64>,
    pub rollouts: usize,
    pub total_reward: Option<f64>,
    pub total_cost: Option<f64>,
    pub budget: f64,
    pub safe: Option<bool>,
    pub pct_safe: Option<f64>,
    pub norm_reward: Option<f64>,
    pub norm_cost: Option<f64>,
}

/// Column order of `eval.csv`, checked when reading it back.
pub const EVAL_COLUMNS: [&str; 16] = [
    "schema",
    "manifest",
    "row",
    "method",
    "task",
    "parameter",
    "value",
    "seed",
    "rollouts",
    "total_reward",
    "total_cost",
    "budget",
    "safe",
    "pct_safe",
    "norm_reward",
    "norm_cost",
];

/// Mean undiscounted totals of one checkpoint in one test environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub method: String,
    pub seed: u64,
    pub task: String,
    pub parameter: String,
    pub value: f64,
    pub env_index: usize,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
}

impl EvalCell {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    pub fn mean_cost(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodAggregate {
    pub method: String,
    pub cells: usize,
    pub safe_cells: usize,
    /// In `[0, 100]`.
    pub pct_safe: f64,
    pub mean_reward: f64,
    pub mean_cost: f64,
    /// Mean over test environments of `mean(method) / mean(baseline)`,
    /// skipping environments where the baseline mean is zero; `NaN` when no
    /// environment qualifies.
    pub norm_reward: f64,
    pub norm_cost: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<MethodAggregate>,
    pub baseline: String,
    pub manifest: Option<RunManifest>,
}

/// `safe_rl` for plain training, `otp` with perturbations; non-default
/// update rules are appended (`otp_lagrange`).
pub fn method_label(cfg: &TrainConfig) -> String {
    let base = if cfg.robust { "otp" } else { BASELINE_METHOD };
    match cfg.method {
        Method::Crpo => base.to_string(),
        Method::Lagrange => format!("{base}_lagrange"),
    }
}

/// A run directory resolves to its final checkpoint.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoints").join("final.ckpt")
    } else {
        path.to_path_buf()
    }
}

fn fmt_opt(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn env_key(task: &str, value: f64) -> (String, u64) {
    (task.to_string(), value.to_bits())
}

/// Baseline method: `safe_rl` when present, otherwise the first one seen.
pub fn pick_baseline<'a>(methods: impl IntoIterator<Item = &'a str>) -> String {
    let all: Vec<&str> = methods.into_iter().collect();
    if all.contains(&BASELINE_METHOD) {
        BASELINE_METHOD.to_string()
    } else {
        all.first().map(|s| s.to_string()).unwrap_or_default()
    }
}

/// Per-method aggregates over cell rows. Methods are listed baseline first,
/// then in name order.
pub fn aggregate(cells: &[EvalRow], baseline: &str) -> Vec<MethodAggregate> {
    let mut by_method: BTreeMap<&str, Vec<&EvalRow>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.row == "cell") {
        by_method.entry(c.method.as_str()).or_default().push(c);
    }
    let env_means = |rows: &[&EvalRow]| {
        let mut acc: BTreeMap<(String, u64), (f64, f64, usize)> = BTreeMap::new();
        for r in rows {
            let e = acc.entry(env_key(&r.task, r.value.unwrap_or(f64::NAN))).or_default();
            e.0 += r.total_reward.unwrap_or(f64::NAN);
            e.1 += r.total_cost.unwrap_or(f64::NAN);
            e.2 += 1;
        }
        acc.into_iter()
            .map(|(k, (r, c, n))| (k, (r / n as f64, c / n as f64)))
            .collect::<BTreeMap<_, _>>()
    };
    let base_means = by_method.get(baseline).map(|rows| env_means(rows)).unwrap_or_default();
    let mut order: Vec<&str> = by_method.keys().copied().collect();
    order.sort_by_key(|m| (*m != baseline, m.to_string()));
    order
        .into_iter()
        .map(|method| {
            let rows = &by_method[method];
            let safe_cells = rows.iter().filter(|r| r.safe == Some(true)).count();
            let means = env_means(rows);
            let ratio = |pick: fn(&(f64, f64)) -> f64| {
                let ratios: Vec<f64> = means
                    .iter()
                    .filter_map(|(k, m)| {
                        let b = base_means.get(k)?;
                        (pick(b) != 0.0).then(|| pick(m) / pick(b))
                    })
                    .collect();
                if ratios.is_empty() {
                    f64::NAN
                } else {
                    ratios.iter().sum::<f64>() / ratios.len() as f64
                }
            };
            let n = rows.len();
            MethodAggregate {
                method: method.to_string(),
                cells: n,
                safe_cells,
                pct_safe: 100.0 * safe_cells as f64 / n as f64,
                mean_reward: rows.iter().map(|r| r.total_reward.unwrap_or(f64::NAN)).sum::<f64>() / n as f64,
                mean_cost: rows.iter().map(|r| r.total_cost.unwrap_or(f64::NAN)).sum::<f64>() / n as f64,
                norm_reward: ratio(|m| m.0),
                norm_cost: ratio(|m| m.1),
            }
        })
        .collect()
}

struct Loaded {
    path: PathBuf,
    digest: String,
    method: String,
    seed: u64,
    policy: GaussianPolicy,
}

fn load(path: &Path) -> Result<Loaded, HarnessError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let cfg: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone()).map_err(|e| {
        HarnessError::Usage(format!("{}: checkpoint carries no usable train_config: {e}", path.display()))
    })?;
    Ok(Loaded {
        path: path.to_path_buf(),
        digest: sha256_hex(&bytes),
        method: method_label(&cfg),
        seed: cfg.seed,
        policy: GaussianPolicy::from_net(ck.net("policy")?)?,
    })
}

fn rollout_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(j as u64)
}

fn worker_cap(opts: &EvalOptions) -> Option<usize> {
    opts.workers.or_else(|| {
        std::env::var("OTP_NUM_WORKERS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|n| *n > 0)
    })
}

/// Sweeps every checkpoint over `make_test_suite(task, n_points)` with
/// `rollouts` deterministic-policy episodes per cell. A cell is safe when its
/// mean total cost is within the budget. With `outdir`, writes `eval.csv`
/// and `manifest.json`.
pub fn cmd_eval(
    checkpoints: &[PathBuf],
    task: &TaskConfig,
    opts: &EvalOptions,
    outdir: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    if checkpoints.is_empty() {
        return Err(HarnessError::Usage("no checkpoints given".into()));
    }
    if opts.rollouts == 0 {
        return Err(HarnessError::Usage("rollouts must be positive".into()));
    }
    let resolved: Vec<PathBuf> = checkpoints.iter().map(|p| resolve_checkpoint(p)).collect();
    let missing: Vec<PathBuf> = resolved.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingCheckpoints(missing));
    }
    let loaded = resolved.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let probe = task.build();
    for l in &loaded {
        if l.policy.state_dim() != probe.state_dim() || l.policy.action_dim() != probe.action_dim() {
            return Err(HarnessError::Usage(format!(
                "{}: policy is {}->{} but task {} is {}->{}",
                l.path.display(),
                l.policy.state_dim(),
                l.policy.action_dim(),
                task.name(),
                probe.state_dim(),
                probe.action_dim()
            )));
        }
    }
    let suite = make_test_suite(task, opts.n_points)?;
    let budget = opts.budget.unwrap_or_else(|| task.budget());
    let parameter = task.perturbation().name;

    let jobs: Vec<(usize, usize)> = (0..loaded.len())
        .flat_map(|c| (0..suite.len()).map(move |e| (c, e)))
        .collect();
    let mut cells = par::with_thread_cap(worker_cap(opts), || {
        par::map_slice(&jobs, opts.exec, |&(c, e)| {
            let l = &loaded[c];
            let mut env = suite[e].build();
            let (mut rewards, mut costs) = (Vec::new(), Vec::new());
            for j in 0..opts.rollouts {
                let ep = rollout(env.as_mut(), &l.policy, true, rollout_seed(opts.seed, j));
                rewards.push(ep.total_reward);
                costs.push(ep.total_cost);
            }
            (
                c,
                EvalCell {
                    method: l.method.clone(),
                    seed: l.seed,
                    task: task.name().to_string(),
                    parameter: parameter.clone(),
                    value: suite[e].perturbation().value,
                    env_index: e,
                    rewards,
                    costs,
                },
            )
        })
    });
    cells.sort_by(|(ca, a), (cb, b)| {
        (&a.method, a.seed, a.env_index, ca).cmp(&(&b.method, b.seed, b.env_index, cb))
    });
    let cells: Vec<EvalCell> = cells.into_iter().map(|(_, c)| c).collect();

    let mut manifest = outdir.map(|dir| {
        RunManifest::new(
            "eval",
            json!({
                "task": task,
                "n_points": opts.n_points,
                "rollouts": opts.rollouts,
                "budget": budget,
                "rollout_seeds": (0..opts.rollouts).map(|j| rollout_seed(opts.seed, j)).collect::<Vec<_>>(),
            }),
            vec![opts.seed],
            loaded.iter().map(|l| (l.path.display().to_string(), l.digest.clone())).collect(),
            dir,
        )
    });
    let stamp = manifest.as_ref().map(|m| m.short_hash().to_string()).unwrap_or_default();
    let mut rows: Vec<EvalRow> = cells
        .iter()
        .map(|c| {
            let cost = c.mean_cost();
            EvalRow {
                schema: EVAL_SCHEMA.into(),
                manifest: stamp.clone(),
                row: "cell".into(),
                method: c.method.clone(),
                task: c.task.clone(),
                parameter: c.parameter.clone(),
                value: Some(c.value),
                seed: Some(c.seed),
                rollouts: c.rewards.len(),
                total_reward: Some(c.mean_reward()),
                total_cost: Some(cost),
                budget,
                safe: Some(cost <= budget),
                pct_safe: None,
                norm_reward: None,
                norm_cost: None,
            }
        })
        .collect();
    let baseline = pick_baseline(loaded.iter().map(|l| l.method.as_str()));
    let aggregates = aggregate(&rows, &baseline);
    rows.extend(aggregates.iter().map(|a| EvalRow {
        schema: EVAL_SCHEMA.into(),
        manifest: stamp.clone(),
        row: "aggregate".into(),
        method: a.method.clone(),
        task: task.name().to_string(),
        parameter: parameter.clone(),
        value: None,
        seed: None,
        rollouts: opts.rollouts,
        total_reward: fmt_opt(a.mean_reward),
        total_cost: fmt_opt(a.mean_cost),
        budget,
        safe: None,
        pct_safe: Some(a.pct_safe),
        norm_reward: fmt_opt(a.norm_reward),
        norm_cost: fmt_opt(a.norm_cost),
    }));
    if let (Some(dir), Some(m)) = (outdir, manifest.as_mut()) {
        create_dir(dir)?;
        write_csv(&dir.join("eval.csv"), &rows)?;
        m.finish(dir)?;
    }
    Ok(EvalReport {
        cells,
        rows,
        aggregates,
        baseline,
        manifest,
    })
}
