//! Paired comparisons over matched cells.

use serde::Serialize;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    /// Pairs where the first sample is strictly smaller.
    pub below: usize,
    /// Pairs where the first sample is strictly larger.
    pub above: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value (ties dropped).
    pub p_value: f64,
}

/// Exact two-sided sign test of `a[i] - b[i]`.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut below, mut above, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x < y {
            below += 1;
        } else if x > y {
            above += 1;
        } else {
            ties += 1;
        }
    }
    let n = below + above;
    let p_value = if n == 0 {
        1.0
    } else {
        let k = below.min(above) as u64;
        let binom = Binomial::new(0.5, n as u64).expect("valid binomial");
        (2.0 * binom.cdf(k)).min(1.0)
    };
    SignTest {
        below,
        above,
        ties,
        p_value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedT {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value; `NaN` when the test is undefined (n < 2 or zero
    /// spread with a non-zero mean difference gives `0`).
    pub p_value: f64,
}

/// Paired t-test of `a[i] - b[i]` against zero mean difference.
pub fn paired_t(a: &[f64], b: &[f64]) -> PairedT {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    if n < 2 {
        return PairedT {
            n,
            mean_diff: d.first().copied().unwrap_or(f64::NAN),
            t: f64::NAN,
            p_value: f64::NAN,
        };
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return PairedT {
            n,
            mean_diff: mean,
            t,
            p_value: p,
        };
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    PairedT {
        n,
        mean_diff: mean,
        t,
        p_value: 2.0 * dist.cdf(-t.abs()),
    }
}

/// One-sided Welch test p-value for `mean(a) > mean(b)`.
pub fn welch_greater(a: &[f64], b: &[f64]) -> f64 {
    let moments = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    if a.len() < 2 || b.len() < 2 {
        return f64::NAN;
    }
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return if ma > mb { 0.0 } else { 1.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("valid dof");
    1.0 - dist.cdf(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_hand_binomial() {
        // 8 below, 2 above: p = 2 * P(X <= 2), X ~ Bin(10, 1/2) = 2 * 56/1024.
        let a = [0.0; 10];
        let b = [1., 1., 1., 1., 1., 1., 1., 1., -1., -1.];
        let s = sign_test(&a, &b);
        assert_eq!((s.below, s.above, s.ties), (8, 2, 0));
        assert!((s.p_value - 112.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(&[1.0, 2.0], &[1.0, 2.0]).p_value, 1.0);
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        // Differences 1, 2, 3: mean 2, sd 1, t = 2 sqrt(3).
        let r = paired_t(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]);
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        // Two-sided p for t = 3.4641 with 2 dof: 1 - t / sqrt(t^2 + 2) formula.
        let exact = 1.0 - r.t / (r.t * r.t + 2.0).sqrt();
        assert!((r.p_value - exact).abs() < 1e-10);
    }

    #[test]
    fn welch_is_small_only_when_first_is_clearly_larger() {
        let hi = [10.0, 11.0, 12.0, 10.5, 11.5];
        let lo = [1.0, 2.0, 1.5, 0.5, 2.5];
        assert!(welch_greater(&hi, &lo) < 1e-4);
        assert!(welch_greater(&lo, &hi) > 0.999);
    }
}
