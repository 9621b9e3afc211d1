use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Agent, ReplayBuffer, TrainConfig, TrainError, Transition, UpdateLog};
use crate::envs::{rollout, Actor, TaskConfig};
use crate::nn::Checkpoint;

/// Undiscounted totals of one data-collection episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Environment step at which the episode ended.
    pub end_step: usize,
    pub total_reward: f64,
    pub total_cost: f64,
}

/// Deterministic rollout of the current policy in the nominal task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub total_reward: f64,
    pub total_cost: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub updates: Vec<UpdateLog>,
    pub episodes: Vec<EpisodeLog>,
    pub evals: Vec<EvalPoint>,
    /// Retained `(step, checkpoint)` pairs, oldest first; the last one is the
    /// latest state known to be finite.
    pub checkpoints: Vec<(usize, Checkpoint)>,
    pub steps_done: usize,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

impl TrainOutcome {
    pub fn last_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints.last().expect("initial checkpoint always present").1
    }

    /// Mean total cost of the last `window` complete training episodes.
    pub fn final_training_cost(&self, window: usize) -> Option<f64> {
        let n = self.episodes.len().min(window);
        (n > 0).then(|| self.episodes[self.episodes.len() - n..].iter().map(|e| e.total_cost).sum::<f64>() / n as f64)
    }
}

fn checkpoint(agent: &Agent, task: &TaskConfig, cfg: &TrainConfig, step: usize) -> Checkpoint {
    agent.to_checkpoint(json!({
        "step": step,
        "task": task.name(),
        "task_config": task,
        "train_config": cfg,
    }))
}

/// Off-policy safe RL: collect one step per iteration into the replay buffer
/// and, after warmup, run update rounds on uniformly sampled minibatches.
pub fn train(task: &TaskConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    task.validate()?;
    let mut env = task.build();
    let mut eval_env = task.build();
    let (n, m) = (env.state_dim(), env.action_dim());
    let (lo, hi) = env.action_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::new(n, m, cfg, &mut rng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, rng.gen());
    let mut out = TrainOutcome {
        checkpoints: vec![(0, checkpoint(&agent, task, cfg, 0))],
        agent: agent.clone(),
        updates: Vec::new(),
        episodes: Vec::new(),
        evals: Vec::new(),
        steps_done: 0,
        halted: None,
    };
    let mut state = env.reset(rng.gen());
    let (mut ep_r, mut ep_c) = (0.0, 0.0);
    let mut n_updates = 0usize;
    for step in 1..=cfg.total_steps {
        let action: Vec<f64> = if step <= cfg.warmup_steps {
            (0..m).map(|_| rng.gen_range(lo..=hi)).collect()
        } else {
            agent.policy.act(&state, false, &mut rng)
        };
        if action.iter().any(|a| !a.is_finite()) {
            out.halted = Some(format!("non-finite action at step {step}"));
            break;
        }
        let res = env.step(&action);
        ep_r += res.reward;
        ep_c += res.cost;
        let done = res.terminal || res.truncated;
        buffer.push(Transition {
            s: std::mem::replace(&mut state, res.state),
            a: action,
            r: res.reward,
            c: res.cost,
            s_next: state.clone(),
            terminal: res.terminal,
        });
        if done {
            out.episodes.push(EpisodeLog {
                episode: out.episodes.len(),
                end_step: step,
                total_reward: ep_r,
                total_cost: ep_c,
            });
            (ep_r, ep_c) = (0.0, 0.0);
            state = env.reset(rng.gen());
        }

        if step > cfg.warmup_steps && buffer.len() >= cfg.batch && step % cfg.update_every == 0 {
            for _ in 0..cfg.updates_per_step {
                let batch = buffer.sample(cfg.batch).expect("buffer is non-empty");
                match agent.update(&batch, cfg, &mut rng) {
                    Ok(mut log) => {
                        n_updates += 1;
                        if n_updates % cfg.log_every == 0 {
                            log.step = step;
                            log.update = n_updates;
                            out.updates.push(log);
                        }
                    }
                    Err(e) => {
                        out.halted = Some(format!("update {} at step {step}: {e}", n_updates + 1));
                        break;
                    }
                }
            }
            if out.halted.is_some() {
                break;
            }
        }
        out.steps_done = step;

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let ep = rollout(eval_env.as_mut(), &agent.policy, true, cfg.seed ^ step as u64);
            out.evals.push(EvalPoint {
                step,
                total_reward: ep.total_reward,
                total_cost: ep.total_cost,
            });
        }
        let periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if periodic || step == cfg.total_steps {
            out.checkpoints.push((step, checkpoint(&agent, task, cfg, step)));
        }
    }
    if out.halted.is_some() {
        // Roll back to the last state known to be good.
        agent = Agent::from_checkpoint(out.last_checkpoint(), cfg)?;
    }
    out.agent = agent;
    Ok(out)
}
