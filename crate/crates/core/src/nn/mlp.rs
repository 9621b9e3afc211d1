use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

/// Shape of a feed-forward network. With `layer_norm` the first hidden layer is
/// normalized (learned gain and shift) and squashed by `tanh`; every other
/// hidden layer uses ELU and the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub layer_norm: bool,
}

impl MlpSpec {
    pub fn new(sizes: &[usize], layer_norm: bool) -> Self {
        Self {
            sizes: sizes.to_vec(),
            layer_norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn n_params(&self) -> usize {
        let dense: usize = self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let ln = if self.layer_norm { 2 * self.sizes[1] } else { 0 };
        dense + ln
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(NnError::BadSpec(format!("sizes {:?}", self.sizes)));
        }
        if self.layer_norm && self.sizes.len() < 3 {
            return Err(NnError::BadSpec("layer norm needs a hidden layer".into()));
        }
        Ok(())
    }
}

/// How the output layer starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalInit {
    FanIn,
    Zero,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone)]
struct NormCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    norm: Option<NormCache>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    dense: Vec<Dense>,
    /// Offsets of the layer-norm gain and shift.
    norm: Option<(usize, usize)>,
    cache: Option<Cache>,
}

pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

pub fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

impl Mlp {
    /// Fan-in scaled uniform weights `U(-1/sqrt(n_in), 1/sqrt(n_in))`, zero
    /// biases, unit gain and zero shift.
    pub fn new<R: Rng>(spec: MlpSpec, init: FinalInit, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        let last = net.dense.len() - 1;
        for (l, d) in net.dense.clone().iter().enumerate() {
            if l == last && init == FinalInit::Zero {
                continue;
            }
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for x in &mut net.params[d.w..d.w + d.n_in * d.n_out] {
                *x = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// All weights and biases zero, unit layer-norm gain.
    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut dense = Vec::new();
        let mut off = 0;
        for w in spec.sizes.windows(2) {
            dense.push(Dense {
                w: off,
                b: off + w[0] * w[1],
                n_in: w[0],
                n_out: w[1],
            });
            off += w[0] * w[1] + w[1];
        }
        let norm = spec.layer_norm.then(|| (off, off + spec.sizes[1]));
        let mut params = vec![0.0; spec.n_params()];
        if let Some((g, _)) = norm {
            params[g..g + spec.sizes[1]].iter_mut().for_each(|x| *x = 1.0);
        }
        Ok(Self {
            spec,
            params,
            dense,
            norm,
            cache: None,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_layers(&self) -> usize {
        self.dense.len()
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let d = self.dense[l];
        ArrayView2::from_shape((d.n_out, d.n_in), &self.params[d.w..d.b]).expect("layout")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let d = self.dense[l];
        ArrayView1::from(&self.params[d.b..d.b + d.n_out])
    }

    /// Mutable view of the output-layer weights (`n_out x n_in`) and biases.
    pub fn output_layer_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let d = *self.dense.last().expect("at least one layer");
        let (head, tail) = self.params.split_at_mut(d.b);
        (&mut head[d.w..], &mut tail[..d.n_out])
    }

    fn run(&self, x: ArrayView2<'_, f64>, record: bool) -> (Array2<f64>, Option<Cache>) {
        let last = self.dense.len() - 1;
        let mut h = x.to_owned();
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut norm = None;
        for l in 0..=last {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            if record {
                inputs.push(h);
            }
            if l == last {
                if record {
                    pre.push(z.clone());
                }
                h = z;
                break;
            }
            if l == 0 {
                if let Some((g, s)) = self.norm {
                    let width = self.spec.sizes[1];
                    let gain = ArrayView1::from(&self.params[g..g + width]);
                    let shift = ArrayView1::from(&self.params[s..s + width]);
                    let mean = z.mean_axis(Axis(1)).expect("width > 0");
                    let centered = &z - &mean.view().insert_axis(Axis(1));
                    let var = centered.mapv(|c| c * c).mean_axis(Axis(1)).expect("width > 0");
                    let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
                    let normed = &centered * &inv_std.view().insert_axis(Axis(1));
                    let out = (&normed * &gain + &shift).mapv(f64::tanh);
                    if record {
                        pre.push(z);
                        norm = Some(NormCache {
                            normed,
                            inv_std,
                            out: out.clone(),
                        });
                    }
                    h = out;
                    continue;
                }
            }
            h = z.mapv(elu);
            if record {
                pre.push(z);
            }
        }
        let cache = record.then_some(Cache { inputs, pre, norm });
        (h, cache)
    }

    /// Batched forward pass (rows are samples). Records activations for
    /// [`Mlp::backward`].
    pub fn forward(&mut self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        let (out, cache) = self.run(x, true);
        self.cache = cache;
        Ok(out)
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        Ok(self.run(x, false).0)
    }

    /// Single-sample convenience wrapper around [`Mlp::predict`].
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<(), NnError> {
        if x.ncols() != self.spec.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// (summed over the batch) and to the input, for the last forward pass.
    pub fn backward(&self, upstream: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>), NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::BackwardWithoutForward)?;
        let batch = cache.inputs[0].nrows();
        let out_dim = self.spec.output_dim();
        if upstream.dim() != (batch, out_dim) {
            return Err(NnError::DimensionMismatch {
                expected: batch * out_dim,
                got: upstream.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let last = self.dense.len() - 1;
        let mut g = upstream.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                g = match (&cache.norm, self.norm, l) {
                    (Some(nc), Some((go, so)), 0) => {
                        let width = self.spec.sizes[1];
                        let gain = ArrayView1::from(&self.params[go..go + width]);
                        let dy = &g * &nc.out.mapv(|t| 1.0 - t * t);
                        let dgain = (&dy * &nc.normed).sum_axis(Axis(0));
                        let dshift = dy.sum_axis(Axis(0));
                        grads[go..go + width]
                            .iter_mut()
                            .zip(dgain.iter())
                            .for_each(|(a, b)| *a += b);
                        grads[so..so + width]
                            .iter_mut()
                            .zip(dshift.iter())
                            .for_each(|(a, b)| *a += b);
                        let dn = &dy * &gain;
                        let mean_dn = dn.mean_axis(Axis(1)).expect("width > 0");
                        let mean_dn_n = (&dn * &nc.normed).mean_axis(Axis(1)).expect("width > 0");
                        let mut dz = &dn - &mean_dn.view().insert_axis(Axis(1));
                        dz = dz - &nc.normed * &mean_dn_n.view().insert_axis(Axis(1));
                        dz * &nc.inv_std.view().insert_axis(Axis(1))
                    }
                    _ => {
                        let mut dz = g;
                        dz.zip_mut_with(&cache.pre[l], |d, &z| *d *= elu_grad(z));
                        dz
                    }
                };
            }
            let d = self.dense[l];
            let dw = g.t().dot(&cache.inputs[l]);
            grads[d.w..d.b]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(a, b)| *a += b);
            let db = g.sum_axis(Axis(0));
            grads[d.b..d.b + d.n_out]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(a, b)| *a += b);
            g = g.dot(&self.weight(l));
        }
        Ok((grads, g))
    }

    /// Smallest |pre-activation| over ELU units in the last forward pass;
    /// finite-difference checks near zero need a looser tolerance.
    pub fn min_abs_elu_preactivation(&self) -> Option<f64> {
        let cache = self.cache.as_ref()?;
        let last = self.dense.len() - 1;
        let first_elu = usize::from(self.norm.is_some());
        (first_elu..last)
            .flat_map(|l| cache.pre[l].iter().map(|z| z.abs()))
            .reduce(f64::min)
    }
}
