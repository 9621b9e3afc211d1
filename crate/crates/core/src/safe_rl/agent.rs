use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Batch, Method, TrainConfig, TrainError};
use crate::nn::{Adam, Checkpoint, FinalInit, GaussianPolicy, Mlp, MlpSpec, TargetCopy};
use crate::otp::{OtpError, PerturbKind, PerturbationNet, ValueFn};

/// Which signal a critic or perturbation is about.
pub type SignalKind = PerturbKind;

/// Standard-normal noise of the given shape.
pub fn normal_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub(crate) fn state_action(s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = s.ncols();
    let mut x = Array2::zeros((s.nrows(), n + a.ncols()));
    x.slice_mut(s![.., ..n]).assign(&s);
    x.slice_mut(s![.., n..]).assign(&a);
    x
}

/// Reward and cost critics over `(s, a)` with slowly tracking target copies.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub qr: Mlp,
    pub qc: Mlp,
    pub qr_target: Mlp,
    pub qc_target: Mlp,
    shadow_r: TargetCopy,
    shadow_c: TargetCopy,
    opt_r: Adam,
    opt_c: Adam,
}

impl CriticPair {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        layer_norm: bool,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let spec = MlpSpec::new(&sizes, layer_norm);
        let qr = Mlp::new(spec.clone(), FinalInit::FanIn, rng)?;
        let qc = Mlp::new(spec, FinalInit::FanIn, rng)?;
        Ok(Self::from_nets(qr, qc, lr))
    }

    /// Targets start as exact copies of the live networks.
    pub fn from_nets(qr: Mlp, qc: Mlp, lr: f64) -> Self {
        Self {
            shadow_r: TargetCopy::new(qr.params()),
            shadow_c: TargetCopy::new(qc.params()),
            opt_r: Adam::new(qr.n_params(), lr),
            opt_c: Adam::new(qc.n_params(), lr),
            qr_target: qr.clone(),
            qc_target: qc.clone(),
            qr,
            qc,
        }
    }

    pub fn live(&self, kind: SignalKind) -> &Mlp {
        match kind {
            SignalKind::Reward => &self.qr,
            SignalKind::Cost => &self.qc,
        }
    }

    pub fn target(&self, kind: SignalKind) -> &Mlp {
        match kind {
            SignalKind::Reward => &self.qr_target,
            SignalKind::Cost => &self.qc_target,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_r.lr = lr;
        self.opt_c.lr = lr;
    }

    /// Overwrites the target copies with the live parameters.
    pub fn sync_targets(&mut self) {
        self.shadow_r = TargetCopy::new(self.qr.params());
        self.shadow_c = TargetCopy::new(self.qc.params());
        self.qr_target = self.qr.clone();
        self.qc_target = self.qc.clone();
    }

    /// Live critic values `Q(s, a)`.
    pub fn q(&self, kind: SignalKind, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Array1<f64>, TrainError> {
        let out = self.live(kind).predict(state_action(s, a).view())?;
        Ok(out.column(0).to_owned())
    }

    fn ema(&mut self, tau: f64) -> Result<(), TrainError> {
        self.shadow_r.update(self.qr.params(), tau)?;
        self.shadow_c.update(self.qc.params(), tau)?;
        self.qr_target.set_params(&self.shadow_r.params)?;
        self.qc_target.set_params(&self.shadow_c.params)?;
        Ok(())
    }
}

/// `V(x) = Q(x, a(x))` with `a(x) = mean(x) + std(x) * noise`, differentiable
/// in `x` through both the critic and the policy.
pub struct PolicyValue<'a> {
    pub critic: &'a mut Mlp,
    pub policy: &'a mut GaussianPolicy,
    pub noise: Array2<f64>,
}

impl ValueFn for PolicyValue<'_> {
    fn value_and_grad(&mut self, x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>), OtpError> {
        let n = x.ncols();
        let sample = self.policy.sample(x, self.noise.view())?;
        let q = self.critic.forward(state_action(x, sample.actions.view()).view())?;
        let (_, dxa) = self.critic.backward(Array2::ones(q.dim()).view())?;
        let d_actions = dxa.slice(s![.., n..]).to_owned();
        let (_, d_states) = self.policy.backward(d_actions.view(), Array1::zeros(x.nrows()).view())?;
        Ok((q.column(0).to_owned(), d_states + dxa.slice(s![.., ..n])))
    }
}

/// The two perturbation networks of a robust learner.
#[derive(Debug, Clone)]
pub struct Perturbations {
    pub reward: PerturbationNet,
    pub cost: PerturbationNet,
}

impl Perturbations {
    pub fn get(&self, kind: SignalKind) -> &PerturbationNet {
        match kind {
            SignalKind::Reward => &self.reward,
            SignalKind::Cost => &self.cost,
        }
    }
}

/// Sample-based Bellman targets `y = x + gamma * not_done * mean_k Qbar(s~', a'_k)`
/// where `x` is the reward or cost, `s~'` the perturbed next state (or the
/// observed one when `pnet` is `None`) and `a'_k = pi(s~')` under `noise[k]`.
pub fn bellman_targets(
    kind: SignalKind,
    batch: &Batch,
    critics: &CriticPair,
    policy: &GaussianPolicy,
    pnet: Option<&PerturbationNet>,
    gamma: f64,
    noise: &[Array2<f64>],
) -> Result<Array1<f64>, TrainError> {
    let immediate = match kind {
        SignalKind::Reward => &batch.r,
        SignalKind::Cost => &batch.c,
    };
    if gamma == 0.0 {
        return Ok(immediate.clone());
    }
    let next = match pnet {
        Some(p) => p.apply_batch(batch.s.view(), batch.a.view(), batch.s_next.view())?.0,
        None => batch.s_next.clone(),
    };
    let mut v = Array1::zeros(batch.len());
    for xi in noise {
        let a = policy.sample_detached(next.view(), xi.view())?.actions;
        let q = critics.target(kind).predict(state_action(next.view(), a.view()).view())?;
        v += &q.column(0);
    }
    v /= noise.len().max(1) as f64;
    Ok(immediate + &(v * &batch.not_done * gamma))
}

/// Mean-squared Bellman errors of the two critics before their steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLosses {
    pub reward: f64,
    pub cost: f64,
}

/// One regression step of each critic towards its (fixed) targets, followed by
/// the target-copy update.
pub fn critic_update(
    critics: &mut CriticPair,
    batch: &Batch,
    policy: &GaussianPolicy,
    pnets: Option<&Perturbations>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CriticLosses, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let m = batch.a.ncols();
    let noise: Vec<Array2<f64>> = (0..cfg.target_samples)
        .map(|_| normal_noise(rng, batch.len(), m))
        .collect();
    let yr = bellman_targets(
        SignalKind::Reward,
        batch,
        critics,
        policy,
        pnets.map(|p| &p.reward),
        cfg.gamma,
        &noise,
    )?;
    let yc = bellman_targets(
        SignalKind::Cost,
        batch,
        critics,
        policy,
        pnets.map(|p| &p.cost),
        cfg.gamma,
        &noise,
    )?;
    let x = state_action(batch.s.view(), batch.a.view());
    let b = batch.len() as f64;
    let step = |net: &mut Mlp, opt: &mut Adam, y: &Array1<f64>| -> Result<f64, TrainError> {
        let q = net.forward(x.view())?;
        let err = &q.column(0) - y;
        let loss = err.mapv(|e| e * e).sum() / b;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite("critic loss".into()));
        }
        let upstream = (err * (2.0 / b)).insert_axis(Axis(1));
        let (grads, _) = net.backward(upstream.view())?;
        opt.step(net.params_mut(), &grads)?;
        Ok(loss)
    };
    let reward = step(&mut critics.qr, &mut critics.opt_r, &yr)?;
    let cost = step(&mut critics.qc, &mut critics.opt_c, &yc)?;
    critics.ema(cfg.tau)?;
    Ok(CriticLosses { reward, cost })
}

/// `Q(s_b, a_bk)` for `k` policy samples per state (rows are states).
pub fn constraint_samples(
    states: ArrayView2<'_, f64>,
    qc: &Mlp,
    policy: &GaussianPolicy,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, TrainError> {
    if states.nrows() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let mut out = Array2::zeros((states.nrows(), k));
    for j in 0..k {
        let xi = normal_noise(rng, states.nrows(), policy.action_dim());
        let a = policy.sample_detached(states, xi.view())?.actions;
        let q = qc.predict(state_action(states, a.view()).view())?;
        out.column_mut(j).assign(&q.column(0));
    }
    Ok(out)
}

/// Monte Carlo estimate of `E_s E_{a ~ pi} Q_c(s, a)` over the batch states.
pub fn estimate_constraint(
    states: ArrayView2<'_, f64>,
    qc: &Mlp,
    policy: &GaussianPolicy,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    Ok(constraint_samples(states, qc, policy, k, rng)?.mean().expect("non-empty"))
}

/// Which objective a CRPO step followed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Reward,
    Cost,
    Lagrangian,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Reward => "reward",
            Branch::Cost => "cost",
            Branch::Lagrangian => "lagrangian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStep {
    pub branch: Branch,
    pub constraint_estimate: f64,
    /// Surrogate loss before the step.
    pub loss: f64,
    /// Lagrange multiplier after the step (unchanged under CRPO).
    pub multiplier: f64,
}

/// One reparameterized step minimizing
/// `sum_i w_i E[Q_i(s, pi(s))] + entropy_coef * E[log pi]`.
fn actor_step(
    policy: &mut GaussianPolicy,
    opt: &mut Adam,
    states: ArrayView2<'_, f64>,
    terms: &mut [(&mut Mlp, f64)],
    entropy_coef: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let (b, n) = (states.nrows(), states.ncols());
    let xi = normal_noise(rng, b, policy.action_dim());
    let sample = policy.sample(states, xi.view())?;
    let x = state_action(states, sample.actions.view());
    let mut d_actions = Array2::zeros(sample.actions.dim());
    let mut loss = entropy_coef * sample.log_probs.mean().expect("non-empty");
    for (critic, w) in terms.iter_mut() {
        if *w == 0.0 {
            continue;
        }
        let q = critic.forward(x.view())?;
        loss += *w * q.mean().expect("non-empty");
        let (_, dx) = critic.backward(Array2::from_elem(q.dim(), *w / b as f64).view())?;
        d_actions += &dx.slice(s![.., n..]);
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("policy loss".into()));
    }
    let d_logp = Array1::from_elem(b, entropy_coef / b as f64);
    let (grads, _) = policy.backward(d_actions.view(), d_logp.view())?;
    opt.step(policy.net_mut().params_mut(), &grads)?;
    Ok(loss)
}

/// CRPO: reward ascent while the batch constraint estimate is within budget,
/// cost descent otherwise.
#[allow(clippy::too_many_arguments)]
pub fn policy_update_crpo(
    policy: &mut GaussianPolicy,
    opt: &mut Adam,
    states: ArrayView2<'_, f64>,
    critics: &mut CriticPair,
    budget: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyStep, TrainError> {
    let est = estimate_constraint(states, &critics.qc, policy, cfg.constraint_samples, rng)?;
    let (branch, loss) = if est <= budget {
        let l = actor_step(policy, opt, states, &mut [(&mut critics.qr, -1.0)], cfg.entropy_coef, rng)?;
        (Branch::Reward, l)
    } else {
        let l = actor_step(policy, opt, states, &mut [(&mut critics.qc, 1.0)], cfg.entropy_coef, rng)?;
        (Branch::Cost, l)
    };
    Ok(PolicyStep {
        branch,
        constraint_estimate: est,
        loss,
        multiplier: 0.0,
    })
}

/// Lagrangian relaxation: ascend `E[Q_r] - lambda (E[Q_c] - B)`, then move the
/// multiplier by projected ascent on the constraint violation.
#[allow(clippy::too_many_arguments)]
pub fn policy_update_lagrange(
    policy: &mut GaussianPolicy,
    opt: &mut Adam,
    states: ArrayView2<'_, f64>,
    critics: &mut CriticPair,
    multiplier: &mut f64,
    budget: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyStep, TrainError> {
    if *multiplier < 0.0 {
        return Err(TrainError::Config("negative Lagrange multiplier".into()));
    }
    let est = estimate_constraint(states, &critics.qc, policy, cfg.constraint_samples, rng)?;
    let lam = *multiplier;
    let CriticPair { qr, qc, .. } = critics;
    let loss = actor_step(policy, opt, states, &mut [(qr, -1.0), (qc, lam)], cfg.entropy_coef, rng)?;
    *multiplier = lagrange_dual_step(lam, est, budget, cfg.lagrange_dual_lr);
    Ok(PolicyStep {
        branch: Branch::Lagrangian,
        constraint_estimate: est,
        loss,
        multiplier: *multiplier,
    })
}

/// `max(0, lambda + lr (estimate - budget))`.
pub fn lagrange_dual_step(lambda: f64, estimate: f64, budget: f64, lr: f64) -> f64 {
    (lambda + lr * (estimate - budget)).max(0.0)
}

/// Everything a learner owns.
#[derive(Debug, Clone)]
pub struct Agent {
    pub policy: GaussianPolicy,
    pub policy_opt: Adam,
    pub critics: CriticPair,
    pub pnets: Perturbations,
    pub multiplier: f64,
    /// Separate stream for the perturbation-network updates, so toggling
    /// robustness leaves the critic and policy sampling unchanged.
    pub otp_rng: ChaCha8Rng,
}

fn otp_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    rng.set_stream(0x07f9);
    rng
}

/// Diagnostics of one update round.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLog {
    pub step: usize,
    pub update: usize,
    pub branch: Branch,
    pub constraint_estimate: f64,
    pub budget: f64,
    pub critic_loss_r: f64,
    pub critic_loss_c: f64,
    pub policy_loss: f64,
    pub budget_usage_r: f64,
    pub budget_usage_c: f64,
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_pol: f64,
}

impl Agent {
    pub fn new(state_dim: usize, action_dim: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let policy = GaussianPolicy::new(state_dim, action_dim, &cfg.policy_hidden, cfg.layer_norm, rng)?;
        let critics = CriticPair::new(state_dim, action_dim, &cfg.critic_hidden, cfg.layer_norm, cfg.lr_critic, rng)?;
        let otp = cfg.otp_config();
        let pnets = Perturbations {
            reward: PerturbationNet::new(PerturbKind::Reward, state_dim, action_dim, otp.clone(), rng)?,
            cost: PerturbationNet::new(PerturbKind::Cost, state_dim, action_dim, otp, rng)?,
        };
        Ok(Self {
            policy_opt: Adam::new(policy.net().n_params(), cfg.lr_policy),
            policy,
            critics,
            pnets,
            multiplier: cfg.lagrange_init,
            otp_rng: otp_stream(cfg.seed),
        })
    }

    /// Algorithm step on one minibatch: perturbation networks (robust runs
    /// only), critics on (perturbed) targets, then the safe policy update.
    pub fn update(&mut self, batch: &Batch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<UpdateLog, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let (mut usage_r, mut usage_c) = (0.0, 0.0);
        if cfg.robust && !cfg.freeze_otp {
            let m = self.policy.action_dim();
            for kind in [SignalKind::Reward, SignalKind::Cost] {
                let noise = normal_noise(&mut self.otp_rng, batch.len(), m);
                let critic = match kind {
                    SignalKind::Reward => &mut self.critics.qr_target,
                    SignalKind::Cost => &mut self.critics.qc_target,
                };
                let mut v = PolicyValue {
                    critic,
                    policy: &mut self.policy,
                    noise,
                };
                let pnet = match kind {
                    SignalKind::Reward => &mut self.pnets.reward,
                    SignalKind::Cost => &mut self.pnets.cost,
                };
                let st = pnet.update(batch.s.view(), batch.a.view(), batch.s_next.view(), &mut v)?;
                match kind {
                    SignalKind::Reward => usage_r = st.avg_budget,
                    SignalKind::Cost => usage_c = st.avg_budget,
                }
            }
        }
        let pnets = cfg.robust.then_some(&self.pnets);
        let losses = critic_update(&mut self.critics, batch, &self.policy, pnets, cfg, rng)?;
        let step = match cfg.method {
            Method::Crpo => policy_update_crpo(
                &mut self.policy,
                &mut self.policy_opt,
                batch.s.view(),
                &mut self.critics,
                cfg.budget,
                cfg,
                rng,
            )?,
            Method::Lagrange => policy_update_lagrange(
                &mut self.policy,
                &mut self.policy_opt,
                batch.s.view(),
                &mut self.critics,
                &mut self.multiplier,
                cfg.budget,
                cfg,
                rng,
            )?,
        };
        Ok(UpdateLog {
            step: 0,
            update: 0,
            branch: step.branch,
            constraint_estimate: step.constraint_estimate,
            budget: cfg.budget,
            critic_loss_r: losses.reward,
            critic_loss_c: losses.cost,
            policy_loss: step.loss,
            budget_usage_r: usage_r,
            budget_usage_c: usage_c,
            lambda_r: self.pnets.reward.lambda(),
            lambda_c: self.pnets.cost.lambda(),
            lambda_pol: self.multiplier,
        })
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(meta);
        ck.push_net("policy", self.policy.net());
        ck.push_net("q_reward", &self.critics.qr);
        ck.push_net("q_cost", &self.critics.qc);
        ck.push_net("q_reward_target", &self.critics.qr_target);
        ck.push_net("q_cost_target", &self.critics.qc_target);
        ck.push_net("delta_reward", self.pnets.reward.net());
        ck.push_net("delta_cost", self.pnets.cost.net());
        ck.push_raw(
            "multipliers",
            &[self.pnets.reward.lambda(), self.pnets.cost.lambda(), self.multiplier],
        );
        ck
    }

    /// Rebuilds the networks and multipliers (optimizer moments start fresh).
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let policy = GaussianPolicy::from_net(ck.net("policy")?)?;
        let mut critics = CriticPair::from_nets(ck.net("q_reward")?, ck.net("q_cost")?, cfg.lr_critic);
        critics.qr_target.set_params(ck.net("q_reward_target")?.params())?;
        critics.qc_target.set_params(ck.net("q_cost_target")?.params())?;
        critics.shadow_r = TargetCopy::new(critics.qr_target.params());
        critics.shadow_c = TargetCopy::new(critics.qc_target.params());
        let (n, m) = (policy.state_dim(), policy.action_dim());
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let otp = cfg.otp_config();
        let mut reward = PerturbationNet::new(PerturbKind::Reward, n, m, otp.clone(), &mut rng)?;
        let mut cost = PerturbationNet::new(PerturbKind::Cost, n, m, otp, &mut rng)?;
        reward.net_mut().set_params(ck.net("delta_reward")?.params())?;
        cost.net_mut().set_params(ck.net("delta_cost")?.params())?;
        let mult = &ck.get("multipliers")?.data;
        if mult.len() != 3 {
            return Err(TrainError::Config("multipliers tensor must hold 3 values".into()));
        }
        reward.set_lambda(mult[0]);
        cost.set_lambda(mult[1]);
        Ok(Self {
            policy_opt: Adam::new(policy.net().n_params(), cfg.lr_policy),
            policy,
            critics,
            pnets: Perturbations { reward, cost },
            multiplier: mult[2],
            otp_rng: otp_stream(cfg.seed),
        })
    }
}
