use std::path::{Path, PathBuf};

use otp_core::envs::TaskConfig;
use otp_core::harness::{
    cmd_eval, cmd_report, cmd_train, cmd_verify, method_label, resolve_train_config, summarize, EvalOptions, EvalRow,
    HarnessError, ReportInput, Suite, TrainOverrides, EVAL_COLUMNS, EVAL_SCHEMA,
};
use otp_core::par::Execution;
use otp_core::safe_rl::{train, Method, TrainConfig};

fn cell(method: &str, value: f64, seed: u64, reward: f64, cost: f64) -> EvalRow {
    EvalRow {
        schema: EVAL_SCHEMA.into(),
        manifest: "0000000000000000".into(),
        row: "cell".into(),
        method: method.into(),
        task: "point_goal".into(),
        parameter: "mass".into(),
        value: Some(value),
        seed: Some(seed),
        rollouts: 10,
        total_reward: Some(reward),
        total_cost: Some(cost),
        budget: 25.0,
        safe: Some(cost <= 25.0),
        pct_safe: None,
        norm_reward: None,
        norm_cost: None,
    }
}

fn write_rows(path: &Path, rows: &[EvalRow]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    for r in rows {
        w.serialize(r).unwrap();
    }
    w.flush().unwrap();
}

fn sweep(method: &str, cost_scale: f64) -> Vec<EvalRow> {
    let mut rows = Vec::new();
    for (i, v) in [0.5, 1.0, 1.5].iter().enumerate() {
        for seed in 0..3 {
            let base = 10.0 + i as f64 * 5.0 + seed as f64;
            rows.push(cell(method, *v, seed, 200.0 + base, base * cost_scale));
        }
    }
    rows
}

fn tiny_point_goal(steps: usize) -> (TaskConfig, TrainConfig) {
    let task = TaskConfig::builtin("point_goal").unwrap();
    let mut cfg = TrainConfig::for_task(&task);
    cfg.total_steps = steps;
    cfg.warmup_steps = 200;
    cfg.batch = 16;
    cfg.critic_hidden = vec![8, 8];
    cfg.policy_hidden = vec![8, 8];
    cfg.otp_hidden = vec![8];
    cfg.log_every = 1;
    (task, cfg)
}

#[test]
fn report_single_method_is_normalized_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    write_rows(&p, &sweep("safe_rl", 1.0));
    let (summary, md) = cmd_report(&[ReportInput::parse(p.to_str().unwrap())], Some(&dir.path().join("out"))).unwrap();
    assert_eq!(summary.aggregates.len(), 1);
    assert_eq!(summary.aggregates[0].norm_reward, 1.0);
    assert_eq!(summary.aggregates[0].norm_cost, 1.0);
    assert!(md.contains("| safe_rl | 9 | 100.0 | 1.00 | 1.00 |"), "{md}");
    for f in ["report.md", "manifest.json", "figures/point_goal_cost_vs_mass.svg"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
}

#[test]
fn report_identical_inputs_give_identical_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    write_rows(&p, &sweep("safe_rl", 1.0));
    let arg = |l: &str| ReportInput::parse(&format!("{l}={}", p.display()));
    let (summary, _) = cmd_report(&[arg("first"), arg("second")], None).unwrap();
    let (a, b) = (&summary.aggregates[0], &summary.aggregates[1]);
    assert_eq!((a.cells, a.safe_cells, a.mean_reward, a.mean_cost), (b.cells, b.safe_cells, b.mean_reward, b.mean_cost));
    assert_eq!((a.norm_reward, a.norm_cost), (b.norm_reward, b.norm_cost));
    let cmp = &summary.comparisons[0];
    assert_eq!((cmp.sign.ties, cmp.n), (9, 9));
}

#[test]
fn report_half_cost_normalizes_to_exactly_half() {
    let mut rows = sweep("safe_rl", 1.0);
    rows.extend(sweep("otp", 0.5));
    let s = summarize(&rows);
    assert_eq!(s.baseline, "safe_rl");
    let otp = s.aggregates.iter().find(|a| a.method == "otp").unwrap();
    assert_eq!(otp.norm_cost, 0.5);
    assert_eq!(otp.norm_reward, 1.0);
    let cost = s.comparisons.iter().find(|c| c.metric == "cost").unwrap();
    assert_eq!((cost.sign.below, cost.sign.above), (9, 0));
    assert!((cost.sign.p_value - 2.0 / 512.0).abs() < 1e-12);
}

#[test]
fn report_zero_baseline_cost_is_not_available() {
    let mut rows: Vec<EvalRow> = sweep("safe_rl", 0.0);
    rows.extend(sweep("otp", 1.0));
    let s = summarize(&rows);
    let otp = s.aggregates.iter().find(|a| a.method == "otp").unwrap();
    assert!(otp.norm_cost.is_nan());
}

#[test]
fn report_names_the_mismatched_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    let mut header: Vec<&str> = EVAL_COLUMNS.to_vec();
    header[10] = "cost";
    std::fs::write(&p, format!("{}\n", header.join(","))).unwrap();
    let err = cmd_report(&[ReportInput::parse(p.to_str().unwrap())], None).unwrap_err();
    match err {
        HarnessError::Schema { column, .. } => assert_eq!(column, "total_cost"),
        e => panic!("unexpected error {e}"),
    }

    let q = dir.path().join("old.csv");
    let mut row = cell("safe_rl", 1.0, 0, 1.0, 1.0);
    row.schema = "eval/0".into();
    write_rows(&q, &[row]);
    let err = cmd_report(&[ReportInput::parse(q.to_str().unwrap())], None).unwrap_err();
    assert!(matches!(err, HarnessError::Schema { ref column, .. } if column == "schema"), "{err}");
}

#[test]
fn eval_lists_every_missing_checkpoint() {
    let task = TaskConfig::builtin("point_goal").unwrap();
    let missing = [PathBuf::from("/nonexistent/a.ckpt"), PathBuf::from("/nonexistent/b.ckpt")];
    let err = cmd_eval(&missing, &task, &EvalOptions::default(), None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("a.ckpt") && msg.contains("b.ckpt"), "{msg}");
    assert!(matches!(err, HarnessError::MissingCheckpoints(ref v) if v.len() == 2));
}

#[test]
fn train_zero_steps_writes_manifest_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (task, cfg) = tiny_point_goal(0);
    let run = cmd_train(&task, &cfg, dir.path()).unwrap();
    assert!(dir.path().join("manifest.json").is_file());
    let ck: Vec<String> = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let mut ck = ck;
    ck.sort();
    assert_eq!(ck, ["final.ckpt", "step_00000000.ckpt"]);
    assert!(run.outcome.updates.is_empty() && run.outcome.episodes.is_empty());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["total_steps"], 0);
    assert_eq!(manifest["hash"], run.manifest.hash.as_str());
}

#[test]
fn train_outputs_carry_the_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (task, cfg) = tiny_point_goal(600);
    let run = cmd_train(&task, &cfg, dir.path()).unwrap();
    let short = run.manifest.short_hash();
    for f in ["curves.csv", "episodes.csv", "figures/training.svg"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.contains(short), "{f}");
    }
    let ck = otp_core::nn::Checkpoint::from_bytes(&std::fs::read(run.final_checkpoint()).unwrap()).unwrap();
    assert_eq!(ck.meta["manifest"], run.manifest.hash.as_str());
}

#[test]
fn invalid_config_is_a_usage_error() {
    let task = TaskConfig::builtin("point_goal").unwrap();
    let bad = |o: TrainOverrides| matches!(resolve_train_config(&task, &o), Err(HarnessError::Usage(_)));
    assert!(bad(TrainOverrides {
        eps_delta: Some(-1.0),
        ..Default::default()
    }));
    assert!(bad(TrainOverrides {
        config_json: Some(r#"{"no_such_field": 1}"#.into()),
        ..Default::default()
    }));
    assert!(bad(TrainOverrides {
        budget: Some(f64::NAN),
        ..Default::default()
    }));
    let (t, cfg) = resolve_train_config(
        &task,
        &TrainOverrides {
            config_json: Some(r#"{"batch": 32}"#.into()),
            method: Some(Method::Lagrange),
            budget: Some(10.0),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!((cfg.batch, cfg.method, t.budget()), (32, Method::Lagrange, 10.0));
    assert!(cfg.budget < TrainConfig::for_task(&task).budget);
    assert_eq!(method_label(&cfg), "otp_lagrange");
}

#[test]
fn robust_flag_only_touches_perturbations_and_targets() {
    let (task, mut cfg) = tiny_point_goal(700);
    cfg.robust = false;
    let plain = train(&task, &cfg).unwrap();
    // Frozen zero-initialized perturbations leave every target unchanged.
    cfg.robust = true;
    cfg.freeze_otp = true;
    let frozen = train(&task, &cfg).unwrap();
    assert_eq!(plain.updates, frozen.updates);
    // Live perturbation updates show up in their own diagnostics and then
    // move the targets.
    cfg.freeze_otp = false;
    let robust = train(&task, &cfg).unwrap();
    assert!(plain.updates.iter().all(|u| u.budget_usage_r == 0.0 && u.budget_usage_c == 0.0));
    assert!(robust.updates.iter().any(|u| u.budget_usage_r > 0.0 || u.budget_usage_c > 0.0));
    let (p0, r0) = (&plain.updates[0], &robust.updates[0]);
    assert_eq!((p0.step, p0.update, p0.budget), (r0.step, r0.update, r0.budget));
    assert_ne!(
        (p0.critic_loss_r, p0.critic_loss_c),
        (r0.critic_loss_r, r0.critic_loss_c),
        "perturbed targets must change the critic losses"
    );
}

#[test]
fn eval_cost_free_task_is_fully_safe_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let TaskConfig::Chain(mut chain) = TaskConfig::builtin("chain").unwrap() else {
        unreachable!()
    };
    chain.cost = vec![vec![0.0; 2]; chain.positions.len()];
    let task = TaskConfig::Chain(chain);
    let mut cfg = TrainConfig::for_task(&task);
    cfg.total_steps = 0;
    cfg.critic_hidden = vec![8];
    cfg.policy_hidden = vec![8];
    let run = cmd_train(&task, &cfg, &dir.path().join("train")).unwrap();
    let opts = EvalOptions {
        n_points: 2,
        rollouts: 3,
        ..EvalOptions::default()
    };
    let eval = |name: &str, exec: Execution| {
        let out = dir.path().join(name);
        let o = EvalOptions { exec, ..opts.clone() };
        let r = cmd_eval(&[dir.path().join("train")], &task, &o, Some(&out)).unwrap();
        (r, std::fs::read(out.join("eval.csv")).unwrap())
    };
    let (rep, a) = eval("e1", Execution::Parallel);
    let (_, b) = eval("e2", Execution::Sequential);
    assert_eq!(rep.aggregates.len(), 1);
    assert_eq!(rep.aggregates[0].pct_safe, 100.0);
    assert_eq!(rep.aggregates[0].norm_reward, 1.0);
    assert_eq!(a, b, "eval.csv must not depend on the schedule");
    let _ = run;
}

#[test]
fn verify_is_deterministic_and_writes_checks() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_verify(Suite::All, 11, 3, Some(dir.path()), Execution::Parallel).unwrap();
    let b = cmd_verify(Suite::All, 11, 3, None, Execution::Sequential).unwrap();
    assert!(a.all_passed());
    let key = |r: &otp_core::harness::CheckRow| (r.check.clone(), r.instance, r.value.to_bits());
    assert_eq!(a.rows.iter().map(key).collect::<Vec<_>>(), b.rows.iter().map(key).collect::<Vec<_>>());
    let csv = std::fs::read_to_string(dir.path().join("checks.csv")).unwrap();
    assert_eq!(csv.lines().count(), a.rows.len() + 1);
    assert!(csv.contains(a.manifest.as_ref().unwrap().short_hash()));
}

#[test]
fn unknown_suite_is_rejected() {
    assert!("duality".parse::<Suite>().is_ok());
    assert!("otp-identities".parse::<Suite>().is_ok());
    assert!("everything".parse::<Suite>().is_err());
}
