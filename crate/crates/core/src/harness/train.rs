use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::svg::{Chart, Series};
use super::{create_dir, write_csv, write_file, HarnessError, RunManifest, CURVES_SCHEMA, EPISODES_SCHEMA};
use crate::envs::TaskConfig;
use crate::safe_rl::{train, Method, TrainConfig, TrainOutcome};

/// Overrides applied on top of a task's defaults, in increasing priority:
/// the JSON config document, then individual flags.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub config_json: Option<String>,
    pub method: Option<Method>,
    pub robust: Option<bool>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub eps_delta: Option<f64>,
    /// Episode budget of the task; the critic threshold follows from it.
    pub budget: Option<f64>,
}

/// Merges a JSON object of overrides into a serializable value.
fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            b.insert(k.clone(), v.clone());
        }
    }
}

/// Resolves the full training configuration. Invalid combinations are
/// reported here, before any compute starts.
pub fn resolve_train_config(task: &TaskConfig, o: &TrainOverrides) -> Result<(TaskConfig, TrainConfig), HarnessError> {
    let mut task = task.clone();
    if let Some(b) = o.budget {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(HarnessError::Usage(format!("budget must be a non-negative number, got {b}")));
        }
        task.set_budget(b);
    }
    task.validate()?;
    let mut cfg = TrainConfig::for_task(&task);
    if let Some(text) = &o.config_json {
        let patch: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| HarnessError::Usage(format!("config file is not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(HarnessError::Usage("config file must hold a JSON object".into()));
        }
        let mut value = serde_json::to_value(&cfg)?;
        merge(&mut value, &patch);
        cfg = serde_json::from_value(value).map_err(|e| HarnessError::Usage(format!("config file: {e}")))?;
    }
    if let Some(m) = o.method {
        cfg.method = m;
    }
    if let Some(r) = o.robust {
        cfg.robust = r;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.steps {
        cfg.total_steps = n;
    }
    if let Some(e) = o.eps_delta {
        cfg.eps_delta = e;
    }
    if o.budget.is_some() {
        cfg.set_task_budget(&task);
    }
    cfg.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
    Ok((task, cfg))
}

#[derive(Serialize)]
struct CurveRow<'a> {
    schema: &'a str,
    manifest: &'a str,
    step: usize,
    update: usize,
    branch: &'a str,
    constraint_estimate: f64,
    budget: f64,
    critic_loss_r: f64,
    critic_loss_c: f64,
    policy_loss: f64,
    budget_usage_r: f64,
    budget_usage_c: f64,
    lambda_r: f64,
    lambda_c: f64,
    lambda_pol: f64,
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    schema: &'a str,
    manifest: &'a str,
    /// `train` for data-collection episodes, `eval` for deterministic
    /// rollouts of the current policy.
    kind: &'a str,
    index: usize,
    step: usize,
    total_reward: f64,
    total_cost: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
    pub outdir: PathBuf,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.outdir.join("checkpoints").join("final.ckpt")
    }
}

/// Trains and writes `manifest.json`, `curves.csv`, `episodes.csv`,
/// `checkpoints/step_XXXXXXXX.ckpt` (plus `final.ckpt`, the last good state)
/// and `figures/training.svg` into `outdir`.
pub fn cmd_train(task: &TaskConfig, cfg: &TrainConfig, outdir: &Path) -> Result<TrainRun, HarnessError> {
    cfg.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
    task.validate()?;
    let mut manifest = RunManifest::new(
        "train",
        json!({"task": task, "train": cfg}),
        vec![cfg.seed],
        Vec::new(),
        outdir,
    );
    let stamp = manifest.short_hash().to_string();
    create_dir(outdir)?;
    let outcome = train(task, cfg)?;

    let curves: Vec<CurveRow> = outcome
        .updates
        .iter()
        .map(|u| CurveRow {
            schema: CURVES_SCHEMA,
            manifest: &stamp,
            step: u.step,
            update: u.update,
            branch: u.branch.as_str(),
            constraint_estimate: u.constraint_estimate,
            budget: u.budget,
            critic_loss_r: u.critic_loss_r,
            critic_loss_c: u.critic_loss_c,
            policy_loss: u.policy_loss,
            budget_usage_r: u.budget_usage_r,
            budget_usage_c: u.budget_usage_c,
            lambda_r: u.lambda_r,
            lambda_c: u.lambda_c,
            lambda_pol: u.lambda_pol,
        })
        .collect();
    write_csv(&outdir.join("curves.csv"), &curves)?;

    let episodes: Vec<EpisodeRow> = outcome
        .episodes
        .iter()
        .map(|e| EpisodeRow {
            schema: EPISODES_SCHEMA,
            manifest: &stamp,
            kind: "train",
            index: e.episode,
            step: e.end_step,
            total_reward: e.total_reward,
            total_cost: e.total_cost,
        })
        .chain(outcome.evals.iter().enumerate().map(|(i, e)| EpisodeRow {
            schema: EPISODES_SCHEMA,
            manifest: &stamp,
            kind: "eval",
            index: i,
            step: e.step,
            total_reward: e.total_reward,
            total_cost: e.total_cost,
        }))
        .collect();
    write_csv(&outdir.join("episodes.csv"), &episodes)?;

    let ckdir = outdir.join("checkpoints");
    create_dir(&ckdir)?;
    for (step, ck) in &outcome.checkpoints {
        let mut ck = ck.clone();
        ck.meta["manifest"] = json!(manifest.hash);
        let bytes = ck.to_bytes();
        write_file(&ckdir.join(format!("step_{step:08}.ckpt")), &bytes)?;
    }
    let mut last = outcome.last_checkpoint().clone();
    last.meta["manifest"] = json!(manifest.hash);
    write_file(&ckdir.join("final.ckpt"), &last.to_bytes())?;

    let figdir = outdir.join("figures");
    create_dir(&figdir)?;
    let window = |xs: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        // Running mean over 10 episodes keeps the curve readable.
        (0..xs.len())
            .map(|i| {
                let lo = i.saturating_sub(9);
                let w = &xs[lo..=i];
                (xs[i].0, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64)
            })
            .collect()
    };
    let chart = Chart {
        title: format!("{} training cost ({})", task.name(), if cfg.robust { "otp" } else { "safe_rl" }),
        x_label: "environment step".into(),
        y_label: "episode cost".into(),
        series: vec![
            Series {
                label: "training episodes".into(),
                points: window(outcome.episodes.iter().map(|e| (e.end_step as f64, e.total_cost)).collect()),
            },
            Series {
                label: "deterministic eval".into(),
                points: outcome.evals.iter().map(|e| (e.step as f64, e.total_cost)).collect(),
            },
        ],
        hline: Some((task.budget(), "budget".into())),
        note: format!("manifest {}", manifest.hash),
    };
    write_file(&figdir.join("training.svg"), chart.render().as_bytes())?;

    if let Some(reason) = &outcome.halted {
        manifest.status = format!("halted: {reason}");
    }
    manifest.finish(outdir)?;
    Ok(TrainRun {
        manifest,
        outcome,
        outdir: outdir.to_path_buf(),
    })
}
