use ndarray::{Array1, Array2};
use otp_core::nn::gradcheck::{check, check_mlp, FD_STEP, KINK_TOL, SMOOTH_TOL};
use otp_core::nn::policy::{softplus, softplus_inv, INIT_STD, STD_FLOOR};
use otp_core::nn::{Adam, Checkpoint, FinalInit, GaussianPolicy, Mlp, MlpSpec, NnError, TargetCopy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

fn randomize(net: &mut Mlp, rng: &mut ChaCha8Rng, scale: f64) {
    net.params_mut().iter_mut().for_each(|p| *p = rng.gen_range(-scale..scale));
}

/// Straight-line re-evaluation of the network arithmetic from the flat
/// parameter layout: per layer `W` (row-major, out x in) then `b`; layer-norm
/// gain and shift at the very end.
fn reference_forward(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let n_layers = spec.sizes.len() - 1;
    let dense_total: usize = spec.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let mut h = x.to_vec();
    let mut off = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (spec.sizes[l], spec.sizes[l + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = 0.0;
            for i in 0..n_in {
                acc += h[i] * params[off + o * n_in + i];
            }
            z[o] = acc + params[off + n_in * n_out + o];
        }
        off += n_in * n_out + n_out;
        if l == n_layers - 1 {
            return z;
        }
        if l == 0 && spec.layer_norm {
            let mean = z.iter().sum::<f64>() / n_out as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_out as f64;
            let sd = (var + 1e-5).sqrt();
            h = (0..n_out)
                .map(|k| {
                    let g = params[dense_total + k];
                    let b = params[dense_total + n_out + k];
                    (g * (z[k] - mean) / sd + b).tanh()
                })
                .collect();
        } else {
            h = z.iter().map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect();
        }
    }
    unreachable!()
}

fn archs() -> Vec<MlpSpec> {
    vec![
        MlpSpec::new(&[6, 32, 32, 32, 1], true),
        MlpSpec::new(&[4, 32, 32, 4], true),
        MlpSpec::new(&[10, 16, 16, 4], false),
        MlpSpec::new(&[3, 5], false),
    ]
}

#[test]
fn zero_final_layer_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Mlp::new(MlpSpec::new(&[5, 8, 8, 3], true), FinalInit::Zero, &mut rng).unwrap();
    let x = rand_matrix(&mut rng, 7, 5, 3.0);
    assert!(net.predict(x.view()).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn single_linear_layer_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = Mlp::zeros(MlpSpec::new(&[3, 2], false)).unwrap();
    randomize(&mut net, &mut rng, 1.0);
    let p = net.params().to_vec();
    let x = [0.3, -1.2, 2.0];
    let y = net.predict_one(&x).unwrap();
    for o in 0..2 {
        let expect = p[o * 3] * x[0] + p[o * 3 + 1] * x[1] + p[o * 3 + 2] * x[2] + p[6 + o];
        assert!((y[o] - expect).abs() < 1e-15);
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for spec in archs() {
        for _ in 0..20 {
            let mut net = Mlp::zeros(spec.clone()).unwrap();
            randomize(&mut net, &mut rng, 0.8);
            let x = rand_matrix(&mut rng, 4, spec.input_dim(), 2.0);
            let out = net.forward(x.view()).unwrap();
            for r in 0..4 {
                let row: Vec<f64> = x.row(r).to_vec();
                let reference = reference_forward(&spec, net.params(), &row);
                for (a, b) in out.row(r).iter().zip(&reference) {
                    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Mlp::new(MlpSpec::new(&[4, 16, 16, 2], true), FinalInit::FanIn, &mut rng).unwrap();
    let x = rand_matrix(&mut rng, 9, 4, 1.0);
    let a = net.forward(x.view()).unwrap();
    let b = net.forward(x.view()).unwrap();
    let c = net.clone().predict(x.view()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn backward_requires_forward_and_checks_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Mlp::new(MlpSpec::new(&[3, 4, 2], false), FinalInit::FanIn, &mut rng).unwrap();
    assert_eq!(
        net.backward(Array2::zeros((1, 2)).view()).unwrap_err(),
        NnError::BackwardWithoutForward
    );
    assert!(matches!(
        net.forward(Array2::zeros((1, 5)).view()),
        Err(NnError::DimensionMismatch { .. })
    ));
    net.forward(rand_matrix(&mut rng, 2, 3, 1.0).view()).unwrap();
    let (g, dx) = net.backward(Array2::zeros((2, 2)).view()).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
    assert!(dx.iter().all(|v| *v == 0.0));
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for spec in archs() {
        for _ in 0..20 {
            let mut net = Mlp::zeros(spec.clone()).unwrap();
            randomize(&mut net, &mut rng, 0.6);
            let x = rand_matrix(&mut rng, 3, spec.input_dim(), 1.5);
            let up = rand_matrix(&mut rng, 3, spec.output_dim(), 1.0);
            let (res, tol) = check_mlp(&mut net, x.view(), up.view(), FD_STEP).unwrap();
            assert!(res.max_rel_err <= tol, "{spec:?}: {res:?} (tol {tol})");
        }
    }
}

#[test]
fn gradients_near_the_elu_kink_pass_relaxed_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = MlpSpec::new(&[2, 6, 6, 1], false);
    for _ in 0..20 {
        let mut net = Mlp::zeros(spec.clone()).unwrap();
        randomize(&mut net, &mut rng, 0.8);
        let x = rand_matrix(&mut rng, 1, 2, 1.0);
        // Shift the first hidden biases so several pre-activations sit within
        // a few finite-difference steps of zero.
        for k in 0..6 {
            let w0 = net.params()[2 * k];
            let w1 = net.params()[2 * k + 1];
            let z = w0 * x[[0, 0]] + w1 * x[[0, 1]];
            net.params_mut()[12 + k] = -z + rng.gen_range(-3e-6..3e-6);
        }
        let up = Array2::from_elem((1, 1), 1.0);
        let (res, tol) = check_mlp(&mut net, x.view(), up.view(), FD_STEP).unwrap();
        assert_eq!(tol, KINK_TOL);
        assert!(res.max_rel_err <= KINK_TOL, "{res:?}");
    }
}

#[test]
fn policy_mode_and_log_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pol = GaussianPolicy::new(4, 2, &[16, 16], true, &mut rng).unwrap();
    let s = [0.1, -0.4, 1.0, 0.0];
    let (a, lp) = pol.sample_one(&s, &[0.0, 0.0]).unwrap();
    let sv = ndarray::ArrayView2::from_shape((1, 4), &s[..]).unwrap();
    let (mean, std) = pol.dist(sv).unwrap();
    assert_eq!(a, mean.row(0).to_vec());
    let expect = -std.iter().map(|x| x.ln()).sum::<f64>() - (2.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
    assert!((lp - expect).abs() < 1e-12);
    // Freshly initialized policies have the configured spread everywhere.
    assert!(std.iter().all(|x| (x - INIT_STD).abs() < 1e-12));
}

#[test]
fn doubling_std_lowers_log_density_at_the_mean_by_n_log_2() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 3;
    let mut pol = GaussianPolicy::new(2, n, &[8, 8], true, &mut rng).unwrap();
    let s = [0.5, 0.2];
    let (_, lp1) = pol.sample_one(&s, &vec![0.0; n]).unwrap();
    let (_, b) = pol.net_mut().output_layer_mut();
    for k in n..2 * n {
        b[k] = softplus_inv(2.0 * INIT_STD - STD_FLOOR);
    }
    let (_, lp2) = pol.sample_one(&s, &vec![0.0; n]).unwrap();
    assert!((lp1 - lp2 - n as f64 * 2f64.ln()).abs() < 1e-9);
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn density_integrates_to_box_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut pol = GaussianPolicy::new(3, 2, &[8, 8], false, &mut rng).unwrap();
    randomize(pol.net_mut(), &mut rng, 0.5);
    let s = [0.3, -0.2, 0.9];
    let sv = ndarray::ArrayView2::from_shape((1, 3), &s[..]).unwrap();
    let (mean, std) = pol.dist(sv).unwrap();
    let (m, d) = (mean.row(0).to_vec(), std.row(0).to_vec());
    let lo = [m[0] - 1.0 * d[0], m[1] - 0.5 * d[1]];
    let hi = [m[0] + 2.0 * d[0], m[1] + 1.5 * d[1]];
    let dens = |a0: f64, a1: f64| {
        let a = Array2::from_shape_vec((1, 2), vec![a0, a1]).unwrap();
        pol.log_prob(sv, a.view()).unwrap()[0].exp()
    };
    let mass = simpson(|a0| simpson(|a1| dens(a0, a1), lo[1], hi[1], 60), lo[0], hi[0], 60);
    let exact: f64 = (0..2)
        .map(|k| {
            let nrm = Normal::new(m[k], d[k]).unwrap();
            nrm.cdf(hi[k]) - nrm.cdf(lo[k])
        })
        .product();
    assert!((mass - exact).abs() <= 1e-3, "{mass} vs {exact}");

    // 1-D slice: the conditional density over a wide interval has unit mass.
    let slice = simpson(|a0| dens(a0, m[1]), m[0] - 10.0 * d[0], m[0] + 10.0 * d[0], 400);
    let marginal_at = (-(d[1].ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln()).exp();
    assert!((slice / marginal_at - 1.0).abs() <= 1e-3);
}

#[test]
fn policy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut pol = GaussianPolicy::new(4, 2, &[16, 16], true, &mut rng).unwrap();
        randomize(pol.net_mut(), &mut rng, 0.5);
        let states = rand_matrix(&mut rng, 3, 4, 1.0);
        let noise = rand_matrix(&mut rng, 3, 2, 1.5);
        let da = rand_matrix(&mut rng, 3, 2, 1.0);
        let dl = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        pol.sample(states.view(), noise.view()).unwrap();
        let (grads, dstates) = pol.backward(da.view(), dl.view()).unwrap();
        let objective = |p: &GaussianPolicy, st: &Array2<f64>| {
            let out = p.sample_detached(st.view(), noise.view()).unwrap();
            (&out.actions * &da).sum() + (&out.log_probs * &dl).sum()
        };
        let params = pol.net().params().to_vec();
        let mut probe = pol.clone();
        let r = check(&params, &grads, FD_STEP, |theta| {
            probe.net_mut().set_params(theta).unwrap();
            objective(&probe, &states)
        });
        let flat: Vec<f64> = states.iter().copied().collect();
        let r2 = check(&flat, dstates.as_slice().unwrap(), FD_STEP, |x| {
            objective(&pol, &Array2::from_shape_vec((3, 4), x.to_vec()).unwrap())
        });
        assert!(r.merge(r2).max_rel_err <= SMOOTH_TOL, "{r:?} {r2:?}");
    }
}

#[test]
fn ema_contract() {
    let live = vec![1.0, -2.0, 3.0];
    let mut t = TargetCopy::new(&[0.0, 0.0, 0.0]);
    t.update(&live, 1.0).unwrap();
    assert_eq!(t.params, live);
    t.update(&live, 0.3).unwrap();
    assert_eq!(t.params, live);

    let start = vec![5.0, 5.0, -5.0];
    let mut t = TargetCopy::new(&start);
    let tau = 0.005;
    let k = 700;
    for _ in 0..k {
        t.update(&live, tau).unwrap();
    }
    for i in 0..3 {
        let expect = live[i] + (1.0 - tau).powi(k) * (start[i] - live[i]);
        assert!((t.params[i] - expect).abs() < 1e-11, "{} vs {expect}", t.params[i]);
    }
    assert!(t.update(&live, 0.0).is_err());
}

#[test]
fn adam_is_deterministic_and_descends() {
    let grad = |x: &[f64]| vec![2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)];
    let run = || {
        let mut x = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..3000 {
            let g = grad(&x);
            opt.step(&mut x, &g).unwrap();
        }
        x
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!((a[0] - 3.0).abs() < 1e-3 && (a[1] + 1.0).abs() < 1e-3, "{a:?}");
    let mut opt = Adam::new(1, 0.1);
    assert!(opt.step(&mut [0.0], &[f64::NAN]).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = Mlp::new(MlpSpec::new(&[3, 7, 2], true), FinalInit::FanIn, &mut rng).unwrap();
    let mut ck = Checkpoint::new(serde_json::json!({"seed": 12, "step": 0}));
    ck.push_net("q", &net);
    ck.push_raw("duals", &[0.1, 0.2]);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.net("q").unwrap().params(), net.params());
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(back.get("missing").is_err());
}

proptest! {
    #[test]
    fn softplus_is_positive(x in -700.0f64..700.0) {
        prop_assert!(softplus(x) + STD_FLOOR > 0.0);
        prop_assert!(softplus(x) >= 0.0);
    }

    #[test]
    fn ema_stays_between_old_and_live(old in -10.0f64..10.0, live in -10.0f64..10.0, tau in 1e-4f64..1.0) {
        let mut t = TargetCopy::new(&[old]);
        t.update(&[live], tau).unwrap();
        let (lo, hi) = (old.min(live), old.max(live));
        prop_assert!(t.params[0] >= lo && t.params[0] <= hi);
    }
}
