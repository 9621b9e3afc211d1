//! The inner worst-case expectation over an optimal transport ball, solved two
//! independent ways: as a linear program over couplings (primal) and as a
//! one-dimensional convex problem in the budget multiplier (dual).

use super::RobustError;
use crate::transport::lp::{LinearProgram, LpError, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Worst case for rewards.
    Inf,
    /// Worst case for costs.
    Sup,
}

#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub value: f64,
    /// Second marginal of the optimal coupling.
    pub worst_dist: Vec<f64>,
    /// Optimal coupling, `plan[i][j]` mass moved from nominal state `i` to `j`.
    pub plan: Vec<Vec<f64>>,
    /// `sum d * plan`, at most `eps`.
    pub budget_used: f64,
    /// Multiplier of the budget row (>= 0).
    pub budget_multiplier: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DualSolution {
    pub value: f64,
    pub lambda: f64,
}

fn check_inputs(
    p_hat: &[f64],
    values: &[f64],
    cost: &[Vec<f64>],
    eps: f64,
) -> Result<(), RobustError> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(RobustError::NegativeRadius(eps));
    }
    let n = values.len();
    if p_hat.len() != n || cost.len() != n || cost.iter().any(|r| r.len() != n) {
        return Err(RobustError::Shape(format!(
            "p_hat {}, values {}, cost {} rows",
            p_hat.len(),
            n,
            cost.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RobustError::NonFinite);
    }
    Ok(())
}

/// `opt_{p : OTC(p_hat, p) <= eps} E_p[values]` as a linear program over
/// couplings with first marginal `p_hat` and the budget row `sum d nu <= eps`.
pub fn worst_case_expectation_primal(
    p_hat: &[f64],
    values: &[f64],
    cost: &[Vec<f64>],
    eps: f64,
    direction: Direction,
) -> Result<PrimalSolution, RobustError> {
    check_inputs(p_hat, values, cost, eps)?;
    let n = values.len();
    let sign = match direction {
        Direction::Sup => -1.0,
        Direction::Inf => 1.0,
    };
    let mut cells = Vec::new();
    for (i, &w) in p_hat.iter().enumerate() {
        if w > 0.0 {
            for j in 0..n {
                if cost[i][j].is_finite() {
                    cells.push((i, j));
                }
            }
        }
    }
    let mut lp = LinearProgram::new(cells.len());
    for (v, &(_, j)) in cells.iter().enumerate() {
        lp.objective[v] = sign * values[j];
    }
    for (i, &w) in p_hat.iter().enumerate() {
        if w > 0.0 {
            let row = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.0 == i)
                .map(|(v, _)| (v, 1.0))
                .collect();
            lp.add(row, Relation::Eq, w);
        }
    }
    let budget_row = lp.constraints.len();
    let budget = cells
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| cost[i][j] > 0.0)
        .map(|(v, &(i, j))| (v, cost[i][j]))
        .collect();
    lp.add(budget, Relation::Le, eps);

    let sol = lp.solve().map_err(|e| match e {
        LpError::Infeasible(_) => RobustError::Infeasible,
        other => RobustError::Solver(other.to_string()),
    })?;
    let mut plan = vec![vec![0.0; n]; n];
    for (v, &(i, j)) in cells.iter().enumerate() {
        plan[i][j] = sol.x[v];
    }
    let worst_dist: Vec<f64> = (0..n).map(|j| (0..n).map(|i| plan[i][j]).sum()).collect();
    let value = worst_dist.iter().zip(values).map(|(p, v)| p * v).sum();
    let budget_used = cells
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| cost[i][j] > 0.0)
        .map(|(v, &(i, j))| sol.x[v] * cost[i][j])
        .sum();
    Ok(PrimalSolution {
        value,
        worst_dist,
        plan,
        budget_used,
        budget_multiplier: -sol.duals[budget_row],
    })
}

/// Dual objective for the sup direction:
/// `lambda * eps + sum_i p_hat_i max_j (values_j - lambda d_ij)`.
fn sup_dual_objective(p_hat: &[f64], values: &[f64], cost: &[Vec<f64>], eps: f64, lambda: f64) -> f64 {
    let mut total = lambda * eps;
    for (i, &w) in p_hat.iter().enumerate() {
        if w > 0.0 {
            let best = cost[i]
                .iter()
                .zip(values)
                .filter(|(d, _)| d.is_finite())
                .map(|(d, v)| v - lambda * d)
                .fold(f64::NEG_INFINITY, f64::max);
            total += w * best;
        }
    }
    total
}

/// Dual objective at a given multiplier, in the orientation of `direction`
/// (minimized over `lambda` for `Sup`, maximized for `Inf`).
pub fn dual_objective(
    p_hat: &[f64],
    values: &[f64],
    cost: &[Vec<f64>],
    eps: f64,
    direction: Direction,
    lambda: f64,
) -> f64 {
    match direction {
        Direction::Sup => sup_dual_objective(p_hat, values, cost, eps, lambda),
        Direction::Inf => {
            let neg: Vec<f64> = values.iter().map(|v| -v).collect();
            -sup_dual_objective(p_hat, &neg, cost, eps, lambda)
        }
    }
}

/// Slope of the active line of the sup-dual objective at `lambda`.
fn sup_dual_slope(p_hat: &[f64], values: &[f64], cost: &[Vec<f64>], eps: f64, lambda: f64) -> f64 {
    let mut slope = eps;
    for (i, &w) in p_hat.iter().enumerate() {
        if w > 0.0 {
            let mut best = f64::NEG_INFINITY;
            let mut d_best = 0.0;
            for (d, v) in cost[i].iter().zip(values) {
                if d.is_finite() {
                    let x = v - lambda * d;
                    if x > best {
                        best = x;
                        d_best = *d;
                    }
                }
            }
            slope -= w * d_best;
        }
    }
    slope
}

/// Upper end of the multiplier bracket: beyond `range(V) / min positive cost`
/// the inner maximizer always sits on a zero-cost move and the objective only
/// grows.
pub fn lambda_bracket(p_hat: &[f64], values: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let min_pos = p_hat
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .flat_map(|(i, _)| cost[i].iter())
        .filter(|d| d.is_finite() && **d > 0.0)
        .fold(f64::INFINITY, |a, &d| a.min(d));
    if !(range > 0.0) || !min_pos.is_finite() {
        0.0
    } else {
        range / min_pos
    }
}

fn minimize_sup_dual(p_hat: &[f64], values: &[f64], cost: &[Vec<f64>], eps: f64) -> DualSolution {
    let h = |l: f64| sup_dual_objective(p_hat, values, cost, eps, l);
    let hi = lambda_bracket(p_hat, values, cost);
    let mut best = DualSolution {
        value: h(0.0),
        lambda: 0.0,
    };
    if hi == 0.0 {
        return best;
    }
    let mut consider = |l: f64, v: f64| {
        if v < best.value {
            best = DualSolution { value: v, lambda: l };
        }
    };
    consider(hi, h(hi));

    // Golden-section search down to a 1e-10 relative bracket.
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (h(c), h(d));
    while b - a > 1e-10 * hi {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = h(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = h(d);
        }
    }
    consider(c, fc);
    consider(d, fd);

    // The objective is piecewise linear: intersect the active lines at both
    // ends of the final bracket to land exactly on the kink.
    let (fa, fb) = (h(a), h(b));
    consider(a, fa);
    consider(b, fb);
    let (sa, sb) = (
        sup_dual_slope(p_hat, values, cost, eps, a),
        sup_dual_slope(p_hat, values, cost, eps, b),
    );
    if sb - sa > 0.0 {
        // fa + sa (l - a) = fb + sb (l - b)
        let l = ((fb - sb * b) - (fa - sa * a)) / (sa - sb);
        if l.is_finite() && l >= 0.0 {
            consider(l, h(l));
        }
    }
    best
}

/// Lagrangian dual of the worst-case expectation:
/// `Sup`: `inf_{lambda>=0} E_{p_hat}[ max_s' V(s') - lambda (d(s_hat', s') - eps) ]`,
/// `Inf`: `sup_{lambda>=0} E_{p_hat}[ min_s' V(s') + lambda (d(s_hat', s') - eps) ]`.
/// The inner optimization enumerates states; the outer one is a golden-section
/// search on the convex multiplier problem.
pub fn worst_case_expectation_dual(
    p_hat: &[f64],
    values: &[f64],
    cost: &[Vec<f64>],
    eps: f64,
    direction: Direction,
) -> Result<DualSolution, RobustError> {
    check_inputs(p_hat, values, cost, eps)?;
    for (i, &w) in p_hat.iter().enumerate() {
        if w > 0.0 && cost[i].iter().all(|d| d.is_infinite()) {
            return Err(RobustError::Infeasible);
        }
    }
    Ok(match direction {
        Direction::Sup => minimize_sup_dual(p_hat, values, cost, eps),
        Direction::Inf => {
            let neg: Vec<f64> = values.iter().map(|v| -v).collect();
            let s = minimize_sup_dual(p_hat, &neg, cost, eps);
            DualSolution {
                value: -s.value,
                lambda: s.lambda,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect()
    }

    #[test]
    fn zero_radius_is_nominal() {
        let p = [0.2, 0.3, 0.5];
        let v = [1.0, -2.0, 4.0];
        let nominal: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
        for dir in [Direction::Inf, Direction::Sup] {
            let prim = worst_case_expectation_primal(&p, &v, &tv(3), 0.0, dir).unwrap();
            assert!((prim.value - nominal).abs() < 1e-14);
            for (a, b) in prim.worst_dist.iter().zip(&p) {
                assert!((a - b).abs() < 1e-14);
            }
            let dual = worst_case_expectation_dual(&p, &v, &tv(3), 0.0, dir).unwrap();
            assert!((dual.value - nominal).abs() < 1e-9, "{} {}", dual.value, nominal);
        }
    }

    #[test]
    fn large_radius_moves_everything_to_the_extreme() {
        let p = [0.2, 0.3, 0.5];
        let v = [1.0, -2.0, 4.0];
        let prim = worst_case_expectation_primal(&p, &v, &tv(3), 1.0, Direction::Sup).unwrap();
        assert!((prim.value - 4.0).abs() < 1e-12);
        assert!((prim.worst_dist[2] - 1.0).abs() < 1e-12);
        let prim = worst_case_expectation_primal(&p, &v, &tv(3), 1.0, Direction::Inf).unwrap();
        assert!((prim.value + 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_variation_closed_form() {
        // Under TV the sup moves eps mass from the lowest values to the argmax.
        let p = [0.5, 0.25, 0.25];
        let v = [0.0, 1.0, 2.0];
        let eps = 0.3;
        let expected = 0.25 * 1.0 + (0.25 + 0.3) * 2.0;
        let prim = worst_case_expectation_primal(&p, &v, &tv(3), eps, Direction::Sup).unwrap();
        let dual = worst_case_expectation_dual(&p, &v, &tv(3), eps, Direction::Sup).unwrap();
        assert!((prim.value - expected).abs() < 1e-12);
        assert!((dual.value - expected).abs() < 1e-9);
        assert!((prim.budget_used - eps).abs() < 1e-12);
        // Optimal multiplier is the value gap of the marginal move.
        assert!((dual.lambda - 2.0).abs() < 1e-6, "{}", dual.lambda);
    }

    #[test]
    fn forbidden_moves_are_respected() {
        let inf = f64::INFINITY;
        let cost = vec![vec![0.0, inf], vec![1.0, 0.0]];
        let p = [1.0, 0.0];
        let v = [0.0, 10.0];
        let prim = worst_case_expectation_primal(&p, &v, &cost, 5.0, Direction::Sup).unwrap();
        assert_eq!(prim.value, 0.0);
        let dual = worst_case_expectation_dual(&p, &v, &cost, 5.0, Direction::Sup).unwrap();
        assert_eq!(dual.value, 0.0);
    }

    #[test]
    fn rejects_negative_radius() {
        let r = worst_case_expectation_primal(&[1.0], &[0.0], &[vec![0.0]], -0.1, Direction::Sup);
        assert!(matches!(r, Err(RobustError::NegativeRadius(_))));
        let r = worst_case_expectation_dual(&[1.0], &[0.0], &[vec![0.0]], -0.1, Direction::Inf);
        assert!(matches!(r, Err(RobustError::NegativeRadius(_))));
    }
}
