use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::mlp::{FinalInit, Mlp, MlpSpec};
use super::NnError;

/// Lower bound added to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;
/// Standard deviation of a freshly initialized policy.
pub const INIT_STD: f64 = 0.3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian policy. The backbone emits `2 * action_dim` raw values:
/// the mean is `tanh` of the first half, the standard deviation is
/// `softplus` of the second half plus [`STD_FLOOR`].
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    net: Mlp,
    action_dim: usize,
    cache: Option<SampleCache>,
}

#[derive(Debug, Clone)]
struct SampleCache {
    mean: Array2<f64>,
    std: Array2<f64>,
    raw_std: Array2<f64>,
    noise: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        let mut net = Mlp::new(MlpSpec::new(&sizes, layer_norm), FinalInit::FanIn, rng)?;
        let n_in = *hidden.last().unwrap_or(&state_dim);
        let (w, b) = net.output_layer_mut();
        for row in action_dim..2 * action_dim {
            w[row * n_in..(row + 1) * n_in].iter_mut().for_each(|x| *x = 0.0);
            b[row] = softplus_inv(INIT_STD - STD_FLOOR);
        }
        Ok(Self {
            net,
            action_dim,
            cache: None,
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self, NnError> {
        let out = net.spec().output_dim();
        if out % 2 != 0 {
            return Err(NnError::BadSpec(format!("policy head has odd width {out}")));
        }
        Ok(Self {
            net,
            action_dim: out / 2,
            cache: None,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.net.spec().input_dim()
    }

    fn split(&self, raw: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let k = self.action_dim;
        let mean = raw.slice(s![.., ..k]).mapv(f64::tanh);
        let raw_std = raw.slice(s![.., k..]).to_owned();
        let std = raw_std.mapv(|x| softplus(x) + STD_FLOOR);
        (mean, std, raw_std)
    }

    /// Mean and standard deviation for a batch of states.
    pub fn dist(&self, states: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>), NnError> {
        let raw = self.net.predict(states)?;
        let (mean, std, _) = self.split(&raw);
        Ok((mean, std))
    }

    /// Reparameterized sample `a = mean + std * noise` with its log density.
    /// Records what [`GaussianPolicy::backward`] needs.
    pub fn sample(
        &mut self,
        states: ArrayView2<'_, f64>,
        noise: ArrayView2<'_, f64>,
    ) -> Result<PolicySample, NnError> {
        let raw = self.net.forward(states)?;
        let (mean, std, raw_std) = self.split(&raw);
        if noise.dim() != mean.dim() {
            return Err(NnError::DimensionMismatch {
                expected: mean.len(),
                got: noise.len(),
            });
        }
        let actions = &mean + &(&std * &noise);
        let log_probs = reparam_log_prob(&std, noise);
        self.cache = Some(SampleCache {
            mean: mean.clone(),
            std: std.clone(),
            raw_std,
            noise: noise.to_owned(),
        });
        Ok(PolicySample {
            actions,
            log_probs,
            mean,
            std,
        })
    }

    /// Sample without recording anything (safe on a shared reference).
    pub fn sample_detached(
        &self,
        states: ArrayView2<'_, f64>,
        noise: ArrayView2<'_, f64>,
    ) -> Result<PolicySample, NnError> {
        let (mean, std) = self.dist(states)?;
        if noise.dim() != mean.dim() {
            return Err(NnError::DimensionMismatch {
                expected: mean.len(),
                got: noise.len(),
            });
        }
        let actions = &mean + &(&std * &noise);
        let log_probs = reparam_log_prob(&std, noise);
        Ok(PolicySample {
            actions,
            log_probs,
            mean,
            std,
        })
    }

    /// Single-state sample.
    pub fn sample_one(&self, state: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64), NnError> {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        let n = ArrayView2::from_shape((1, noise.len()), noise).expect("row");
        let out = self.sample_detached(s, n)?;
        Ok((out.actions.row(0).to_vec(), out.log_probs[0]))
    }

    /// Diagonal Gaussian log density of arbitrary actions.
    pub fn log_prob(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>, NnError> {
        let (mean, std) = self.dist(states)?;
        let z = (&actions - &mean) / &std;
        Ok(reparam_log_prob(&std, z.view()))
    }

    /// Gradients of `sum(d_actions * actions) + sum(d_log_probs * log_probs)`
    /// for the last [`GaussianPolicy::sample`], holding the noise fixed.
    /// Returns parameter gradients and gradients with respect to the states.
    pub fn backward(
        &self,
        d_actions: ArrayView2<'_, f64>,
        d_log_probs: ArrayView1<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>), NnError> {
        let c = self.cache.as_ref().ok_or(NnError::BackwardWithoutForward)?;
        if d_actions.dim() != c.mean.dim() || d_log_probs.len() != c.mean.nrows() {
            return Err(NnError::DimensionMismatch {
                expected: c.mean.len(),
                got: d_actions.len(),
            });
        }
        let d_mean = &d_actions * &c.mean.mapv(|m| 1.0 - m * m);
        let dlp = d_log_probs.insert_axis(Axis(1));
        let d_std = &d_actions * &c.noise - &(&dlp / &c.std);
        let d_raw_std = d_std * &c.raw_std.mapv(sigmoid);
        let k = self.action_dim;
        let mut upstream = Array2::zeros((c.mean.nrows(), 2 * k));
        upstream.slice_mut(s![.., ..k]).assign(&d_mean);
        upstream.slice_mut(s![.., k..]).assign(&d_raw_std);
        self.net.backward(upstream.view())
    }
}

fn reparam_log_prob(std: &Array2<f64>, z: ArrayView2<'_, f64>) -> Array1<f64> {
    let per = std.mapv(f64::ln) * -1.0 - &(z.mapv(|x| 0.5 * x * x)) - HALF_LN_2PI;
    per.sum_axis(Axis(1))
}
