use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use otp_core::envs::TaskConfig;
use otp_core::harness::{
    cmd_eval, cmd_report, cmd_train, cmd_verify, resolve_train_config, EvalOptions, ReportInput, Suite,
    TrainOverrides,
};
use otp_core::par::Execution;
use otp_core::safe_rl::Method;

#[derive(Parser)]
#[command(name = "otp", version, about = "Robust constrained RL with optimal transport perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Crpo,
    Lagrange,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Crpo => Method::Crpo,
            MethodArg::Lagrange => Method::Lagrange,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run property suites: duality, contraction, gradients, otp-identities or all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long = "n-instances", default_value_t = 100)]
        n_instances: usize,
        #[arg(long, default_value = "runs/verify")]
        outdir: PathBuf,
        /// Run every instance on the calling thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Train a safe RL agent, with or without perturbations.
    Train {
        /// Built-in task name (chain, point_goal) or a task JSON file.
        #[arg(long, default_value = "point_goal")]
        task: String,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        robust: Option<OnOff>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "eps-delta")]
        eps_delta: Option<f64>,
        /// Episode cost budget of the task.
        #[arg(long)]
        budget: Option<f64>,
        /// JSON object overriding training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        outdir: PathBuf,
    },
    /// Sweep checkpoints (files or run directories) over perturbed test environments.
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "point_goal")]
        task: String,
        #[arg(long = "n-points", default_value_t = 5)]
        n_points: usize,
        #[arg(long, default_value_t = 10)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Episode cost budget used for the safe flag.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value = "runs/eval")]
        outdir: PathBuf,
    },
    /// Summarize eval CSVs (`path` or `label=path`) into a markdown table.
    Report {
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "runs/report")]
        outdir: PathBuf,
    },
}

fn load_task(spec: &str) -> Result<TaskConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(TaskConfig::from_json(&text)?)
    } else {
        Ok(TaskConfig::builtin(spec)?)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify {
            suite,
            seed,
            n_instances,
            outdir,
            sequential,
        } => {
            let suite: Suite = suite.parse()?;
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let report = cmd_verify(suite, seed, n_instances, Some(&outdir), exec)?;
            let failed = report.rows.iter().filter(|r| !r.passed).count();
            println!(
                "{} checks, {} failed; details in {}",
                report.rows.len(),
                failed,
                outdir.join("checks.csv").display()
            );
            for (stem, _) in &report.failures {
                println!("  failed: {stem} (replay in failures/{stem}.json)");
            }
            Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Train {
            task,
            method,
            robust,
            seed,
            steps,
            eps_delta,
            budget,
            config,
            outdir,
        } => {
            let task = load_task(&task)?;
            let config_json = match &config {
                Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
                None => None,
            };
            let overrides = TrainOverrides {
                config_json,
                method: method.map(Method::from),
                robust: robust.map(|r| matches!(r, OnOff::On)),
                seed,
                steps,
                eps_delta,
                budget,
            };
            let (task, cfg) = resolve_train_config(&task, &overrides)?;
            let run = cmd_train(&task, &cfg, &outdir)?;
            let o = &run.outcome;
            println!(
                "trained {} steps, {} updates logged, {} episodes; manifest {}",
                o.steps_done,
                o.updates.len(),
                o.episodes.len(),
                run.manifest.short_hash()
            );
            if let Some(c) = o.final_training_cost(10) {
                println!("final training cost (last 10 episodes): {c:.2}");
            }
            if let Some(reason) = &o.halted {
                eprintln!("training halted: {reason}; last good checkpoint kept");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoints,
            task,
            n_points,
            rollouts,
            seed,
            budget,
            outdir,
        } => {
            let task = load_task(&task)?;
            let opts = EvalOptions {
                n_points,
                rollouts,
                seed,
                budget,
                ..EvalOptions::default()
            };
            let report = cmd_eval(&checkpoints, &task, &opts, Some(&outdir))?;
            for a in &report.aggregates {
                println!(
                    "{:<16} cells {:>3}  safe {:>5.1}%  reward {:>8.2}  cost {:>7.2}",
                    a.method, a.cells, a.pct_safe, a.mean_reward, a.mean_cost
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { inputs, outdir } => {
            if inputs.is_empty() {
                bail!("report needs at least one eval CSV");
            }
            let inputs: Vec<ReportInput> = inputs.iter().map(|s| ReportInput::parse(s)).collect();
            let (_, md) = cmd_report(&inputs, Some(&outdir))?;
            print!("{md}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
