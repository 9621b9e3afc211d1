//! Perturbation networks that map an observed next state to a worst-case
//! virtual one, `g(s, a, s_hat') = s + (s_hat' - s)(1 + delta(s, a, s_hat'))`,
//! trained against a value function under an average budget on `|delta|^2`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, FinalInit, Mlp, MlpSpec, NnError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtpError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0} in perturbation update")]
    NonFinite(&'static str),
}

/// Which value the perturbation pessimizes: rewards are pushed down, costs up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Reward,
    Cost,
}

/// How raw network outputs are bounded to `[-2 eps, 2 eps]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `2 eps * tanh(raw / (2 eps))`: bounded with non-vanishing gradients.
    Smooth,
    /// Hard clamp.
    Hard,
    /// No bound at all.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtpConfig {
    /// Average per-coordinate perturbation magnitude.
    pub eps_delta: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub dual_lr: f64,
    pub lambda_init: f64,
    pub clip: ClipMode,
    /// Additionally rescale each sample so `|delta|^2 / n <= eps^2`.
    pub per_sample_clip: bool,
}

impl Default for OtpConfig {
    fn default() -> Self {
        Self {
            eps_delta: 0.02,
            hidden: vec![64, 64],
            lr: 1e-4,
            dual_lr: 0.01,
            lambda_init: 0.1,
            clip: ClipMode::Smooth,
            per_sample_clip: false,
        }
    }
}

/// Value of a batch of states together with its gradient per state.
pub trait ValueFn {
    fn value_and_grad(&mut self, states: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>), OtpError>;
}

/// Linear probe `V(x) = w . x + b`, handy for analysis and tests.
#[derive(Debug, Clone)]
pub struct LinearValue {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ValueFn for LinearValue {
    fn value_and_grad(&mut self, states: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>), OtpError> {
        let w = Array1::from(self.w.clone());
        let v = states.dot(&w) + self.b;
        let g = Array2::from_shape_fn(states.dim(), |(_, j)| self.w[j]);
        Ok((v, g))
    }
}

/// One observed transition with its perturbed counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTransition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub s_tilde: Vec<f64>,
    pub delta: Vec<f64>,
    /// `(1/n) |delta|^2`, the transport cost of the move.
    pub transport_cost: f64,
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtpStats {
    /// `E |delta|^2 / n` on the batch before the step.
    pub avg_budget: f64,
    /// Mean value at the virtual states before the step.
    pub mean_value: f64,
    /// Dual variable after the step.
    pub lambda: f64,
}

/// Output of the perturbation network for a batch, with what backprop needs.
struct Deltas {
    delta: Array2<f64>,
    /// `d delta / d raw`, zero where masked.
    slope: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PerturbationNet {
    net: Mlp,
    kind: PerturbKind,
    cfg: OtpConfig,
    lambda: f64,
    opt: Adam,
    state_dim: usize,
    action_dim: usize,
}

impl PerturbationNet {
    /// Input features are `(s, a, s_hat' - s)`; the output layer starts at zero
    /// so the perturbation is the identity map before training.
    pub fn new<R: Rng>(
        kind: PerturbKind,
        state_dim: usize,
        action_dim: usize,
        cfg: OtpConfig,
        rng: &mut R,
    ) -> Result<Self, OtpError> {
        let mut sizes = vec![2 * state_dim + action_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(state_dim);
        let net = Mlp::new(MlpSpec::new(&sizes, false), FinalInit::Zero, rng)?;
        let opt = Adam::new(net.n_params(), cfg.lr);
        Ok(Self {
            lambda: cfg.lambda_init,
            net,
            kind,
            cfg,
            opt,
            state_dim,
            action_dim,
        })
    }

    pub fn kind(&self) -> PerturbKind {
        self.kind
    }

    pub fn config(&self) -> &OtpConfig {
        &self.cfg
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda.max(0.0);
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn clip_bound(&self) -> f64 {
        2.0 * self.cfg.eps_delta
    }

    fn check(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, s_hat: ArrayView2<'_, f64>) -> Result<(), OtpError> {
        let b = s.nrows();
        if b == 0 {
            return Err(OtpError::EmptyBatch);
        }
        if s.dim() != (b, self.state_dim) || s_hat.dim() != (b, self.state_dim) || a.dim() != (b, self.action_dim) {
            return Err(OtpError::Shape(format!(
                "s {:?}, a {:?}, s_hat {:?}",
                s.dim(),
                a.dim(),
                s_hat.dim()
            )));
        }
        Ok(())
    }

    fn features(s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, s_hat: ArrayView2<'_, f64>) -> Array2<f64> {
        let (n, m) = (s.ncols(), a.ncols());
        let mut x = Array2::zeros((s.nrows(), 2 * n + m));
        x.slice_mut(s![.., ..n]).assign(&s);
        x.slice_mut(s![.., n..n + m]).assign(&a);
        x.slice_mut(s![.., n + m..]).assign(&(&s_hat - &s));
        x
    }

    /// Bounds raw outputs and zeroes coordinates that did not move
    /// (`s_hat'_i == s_i`), which the multiplicative form cannot perturb.
    fn squash(&self, raw: &Array2<f64>, s: ArrayView2<'_, f64>, s_hat: ArrayView2<'_, f64>) -> Deltas {
        let c = self.clip_bound();
        let mut delta = raw.clone();
        let mut slope = Array2::ones(raw.dim());
        for ((d, g), r) in delta.iter_mut().zip(slope.iter_mut()).zip(raw.iter()) {
            match self.cfg.clip {
                ClipMode::Smooth => {
                    let t = (r / c).tanh();
                    *d = c * t;
                    *g = 1.0 - t * t;
                }
                ClipMode::Hard => {
                    *d = r.clamp(-c, c);
                    *g = if r.abs() < c { 1.0 } else { 0.0 };
                }
                ClipMode::Off => {}
            }
        }
        for ((i, j), d) in delta.indexed_iter_mut() {
            if s_hat[[i, j]] == s[[i, j]] {
                *d = 0.0;
                slope[[i, j]] = 0.0;
            }
        }
        if self.cfg.per_sample_clip {
            let n = self.state_dim as f64;
            let cap = n * self.cfg.eps_delta * self.cfg.eps_delta;
            for (mut drow, mut grow) in delta.axis_iter_mut(Axis(0)).zip(slope.axis_iter_mut(Axis(0))) {
                let sq: f64 = drow.iter().map(|x| x * x).sum();
                if sq > cap {
                    let k = (cap / sq).sqrt();
                    drow.mapv_inplace(|x| x * k);
                    grow.mapv_inplace(|x| x * k);
                }
            }
        }
        Deltas { delta, slope }
    }

    /// Clipped, masked perturbations for a batch.
    pub fn deltas(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        s_hat: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, OtpError> {
        self.check(s, a, s_hat)?;
        let raw = self.net.predict(Self::features(s, a, s_hat).view())?;
        Ok(self.squash(&raw, s, s_hat).delta)
    }

    /// Virtual next states `s_hat' + (s_hat' - s) * delta` for a batch.
    pub fn apply_batch(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        s_hat: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), OtpError> {
        let delta = self.deltas(s, a, s_hat)?;
        Ok((virtual_states(s, s_hat, &delta), delta))
    }

    pub fn apply_perturbation(&self, s: &[f64], a: &[f64], s_hat: &[f64]) -> Result<VirtualTransition, OtpError> {
        let row = |x: &[f64]| Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let (st, d) = self.apply_batch(row(s).view(), row(a).view(), row(s_hat).view())?;
        let delta = d.row(0).to_vec();
        Ok(VirtualTransition {
            s: s.to_vec(),
            a: a.to_vec(),
            s_hat: s_hat.to_vec(),
            s_tilde: st.row(0).to_vec(),
            transport_cost: delta.iter().map(|x| x * x).sum::<f64>() / delta.len().max(1) as f64,
            delta,
        })
    }

    /// `E |delta|^2 / n` over the batch.
    pub fn average_budget(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        s_hat: ArrayView2<'_, f64>,
    ) -> Result<f64, OtpError> {
        let d = self.deltas(s, a, s_hat)?;
        Ok(mean_sq(&d))
    }

    /// Gradient of the batch mean `E V(g)` with respect to each sample's
    /// (clipped, masked) perturbation, together with the perturbations, the
    /// virtual states and their values.
    pub fn value_gradient(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        s_hat: ArrayView2<'_, f64>,
        value: &mut dyn ValueFn,
    ) -> Result<(Array2<f64>, Array2<f64>), OtpError> {
        let delta = self.deltas(s, a, s_hat)?;
        let (grad, _, _) = self.value_term(s, s_hat, &delta, value)?;
        Ok((grad, delta))
    }

    fn value_term(
        &self,
        s: ArrayView2<'_, f64>,
        s_hat: ArrayView2<'_, f64>,
        delta: &Array2<f64>,
        value: &mut dyn ValueFn,
    ) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>), OtpError> {
        let s_tilde = virtual_states(s, s_hat, delta);
        let (v, dv) = value.value_and_grad(s_tilde.view())?;
        if v.len() != s.nrows() || dv.dim() != s.dim() {
            return Err(OtpError::Shape(format!("value {} / grad {:?}", v.len(), dv.dim())));
        }
        if v.iter().chain(dv.iter()).any(|x| !x.is_finite()) {
            return Err(OtpError::NonFinite("value"));
        }
        let b = s.nrows() as f64;
        let mut grad = (&dv * &(&s_hat - &s)) / b;
        ndarray::Zip::from(&mut grad).and(s).and(s_hat).for_each(|g, &s0, &sh| {
            if s0 == sh {
                *g = 0.0;
            }
        });
        Ok((grad, v, s_tilde))
    }

    /// One gradient step on the Lagrangian followed by a projected dual step.
    /// Rewards minimize `E V(g) + lambda (E|delta|^2 - n eps^2)`, costs
    /// maximize `E V(g) - lambda (E|delta|^2 - n eps^2)`.
    pub fn update(
        &mut self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        s_hat: ArrayView2<'_, f64>,
        value: &mut dyn ValueFn,
    ) -> Result<OtpStats, OtpError> {
        self.check(s, a, s_hat)?;
        let b = s.nrows() as f64;
        let n = self.state_dim as f64;
        let raw = self.net.forward(Self::features(s, a, s_hat).view())?;
        let Deltas { delta, slope } = self.squash(&raw, s, s_hat);
        let (dv, v, _) = self.value_term(s, s_hat, &delta, value)?;
        let sign = match self.kind {
            PerturbKind::Reward => 1.0,
            PerturbKind::Cost => -1.0,
        };
        let mut g_delta = dv * sign;
        g_delta.scaled_add(2.0 * self.lambda / b, &delta);
        let g_raw = g_delta * &slope;
        let (grads, _) = self.net.backward(g_raw.view())?;
        if grads.iter().any(|x| !x.is_finite()) {
            return Err(OtpError::NonFinite("gradient"));
        }
        self.opt.step(self.net.params_mut(), &grads)?;

        let avg = mean_sq(&delta);
        let violation = n * avg - n * self.cfg.eps_delta * self.cfg.eps_delta;
        self.lambda = (self.lambda + self.cfg.dual_lr * violation).max(0.0);
        Ok(OtpStats {
            avg_budget: avg,
            mean_value: v.mean().unwrap_or(0.0),
            lambda: self.lambda,
        })
    }
}

/// `s_hat' + (s_hat' - s) * delta`, equal to `s + (s_hat' - s)(1 + delta)` and
/// bit-identical to `s_hat'` when `delta` is zero.
pub fn virtual_states(s: ArrayView2<'_, f64>, s_hat: ArrayView2<'_, f64>, delta: &Array2<f64>) -> Array2<f64> {
    let mut out = s_hat.to_owned();
    ndarray::Zip::from(&mut out)
        .and(s)
        .and(s_hat)
        .and(delta)
        .for_each(|o, &s0, &sh, &d| {
            if d != 0.0 {
                *o = sh + (sh - s0) * d;
            }
        });
    out
}

/// Mean over the batch of `|delta|^2 / n`.
fn mean_sq(delta: &Array2<f64>) -> f64 {
    let n = delta.ncols().max(1) as f64;
    delta.iter().map(|x| x * x).sum::<f64>() / (n * delta.nrows().max(1) as f64)
}
