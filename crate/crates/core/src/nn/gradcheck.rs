//! Central finite-difference checks of analytic gradients.

use ndarray::{Array2, ArrayView2};

use super::mlp::Mlp;
use super::NnError;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradient entries below this magnitude are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Tolerance away from activation kinks.
pub const SMOOTH_TOL: f64 = 1e-4;
/// Tolerance when some ELU unit sits near its kink at zero.
pub const KINK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub n_checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        let (max_rel_err, worst_index) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, other.worst_index)
        } else {
            (self.max_rel_err, self.worst_index)
        };
        GradCheck {
            max_rel_err,
            worst_index,
            n_checked: self.n_checked + other.n_checked,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check<F: FnMut(&[f64]) -> f64>(x: &[f64], analytic: &[f64], step: f64, mut f: F) -> GradCheck {
    let mut probe = x.to_vec();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        n_checked: 0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let e = rel_err(analytic[i], numeric);
        if e > out.max_rel_err || !e.is_finite() {
            out.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            out.worst_index = i;
        }
        out.n_checked += 1;
    }
    out
}

/// Checks parameter and input gradients of `sum(upstream * net(x))`.
/// Returns the combined result and the tolerance that applies at this point.
pub fn check_mlp(
    net: &mut Mlp,
    x: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
    step: f64,
) -> Result<(GradCheck, f64), NnError> {
    net.forward(x)?;
    let (grads, dx) = net.backward(upstream)?;
    let tol = match net.min_abs_elu_preactivation() {
        Some(z) if z < 1e3 * step => KINK_TOL,
        _ => SMOOTH_TOL,
    };
    let loss = |out: Array2<f64>| (&out * &upstream).sum();
    let base = net.clone();
    let params = base.params().to_vec();
    let mut probe = base.clone();
    let p = check(&params, &grads, step, |theta| {
        probe.set_params(theta).expect("same length");
        loss(probe.predict(x).expect("shape checked"))
    });
    let xs: Vec<f64> = x.iter().copied().collect();
    let shape = x.dim();
    let i = check(&xs, dx.as_slice().expect("standard layout"), step, |flat| {
        let xv = ArrayView2::from_shape(shape, flat).expect("same shape");
        loss(base.predict(xv).expect("shape checked"))
    });
    Ok((p.merge(i), tol))
}
