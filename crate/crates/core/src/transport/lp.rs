//! Dense two-phase primal simplex with Bland's pivoting rule.
//!
//! Sized for the small problems in this crate (transportation polytopes up to
//! 32x32 and the budgeted coupling programs of the robust operators). Every
//! pivot is deterministic, so repeated solves of the same program return the
//! same vertex.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Eq,
    Le,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    /// Sparse row as `(variable, coefficient)` pairs.
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `minimize c.x  s.t.  rows, x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// One multiplier per constraint, in the orientation the row was given.
    pub duals: Vec<f64>,
    /// `c_j - y.A_j` for every structural variable.
    pub reduced_costs: Vec<f64>,
    pub pivots: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible (phase-one residual {0:e})")]
    Infeasible(f64),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("pivot limit reached")]
    PivotLimit,
    #[error("final basis is singular")]
    SingularBasis,
    #[error("variable index {0} out of range")]
    BadIndex(usize),
}

struct Tableau {
    rows: usize,
    cols: usize,
    // (rows + 1) x (cols + 1); last row holds reduced costs, last column the rhs.
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    #[inline]
    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let p = self.data[pr * w + pc];
        for c in 0..w {
            self.data[pr * w + c] /= p;
        }
        self.data[pr * w + pc] = 1.0;
        let (before, rest) = self.data.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f != 0.0 {
                for (x, &y) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * y;
                }
                row[pc] = 0.0;
            }
        };
        before.chunks_mut(w).for_each(eliminate);
        after.chunks_mut(w).for_each(eliminate);
        self.basis[pr] = pc;
    }

    /// Loads `cost` into the objective row as reduced costs for the current basis.
    fn price(&mut self, cost: &[f64]) {
        let w = self.cols + 1;
        let obj = self.rows * w;
        for c in 0..self.cols {
            self.data[obj + c] = cost[c];
        }
        self.data[obj + self.cols] = 0.0;
        for r in 0..self.rows {
            let cb = cost[self.basis[r]];
            if cb != 0.0 {
                for c in 0..w {
                    self.data[obj + c] -= cb * self.data[r * w + c];
                }
            }
        }
    }

    fn optimize(&mut self, allowed: &[bool], pivots: &mut usize) -> Result<(), LpError> {
        loop {
            let entering = (0..self.cols)
                .find(|&c| allowed[c] && self.at(self.rows, c) < -COST_TOL);
            let Some(pc) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r).max(0.0) / a;
                    best = match best {
                        None => Some((r, ratio)),
                        Some((br, bratio)) => {
                            let tie = (ratio - bratio).abs() <= 1e-12 * (1.0 + bratio.abs());
                            if ratio < bratio && !tie
                                || tie && self.basis[r] < self.basis[br]
                            {
                                Some((r, ratio))
                            } else {
                                Some((br, bratio))
                            }
                        }
                    };
                }
            }
            let Some((pr, _)) = best else {
                return Err(LpError::Unbounded);
            };
            self.pivot(pr, pc);
            *pivots += 1;
            if *pivots > MAX_PIVOTS {
                return Err(LpError::PivotLimit);
            }
        }
    }
}

impl LinearProgram {
    pub fn new(n_vars: usize) -> Self {
        Self {
            objective: vec![0.0; n_vars],
            constraints: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        let n = self.n_vars();
        let m = self.constraints.len();
        for con in &self.constraints {
            if let Some(&(j, _)) = con.coeffs.iter().find(|(j, _)| *j >= n) {
                return Err(LpError::BadIndex(j));
            }
        }

        // Orient every row so the rhs is non-negative.
        let mut sign = vec![1.0; m];
        let mut rel = Vec::with_capacity(m);
        for (i, con) in self.constraints.iter().enumerate() {
            let mut r = con.relation;
            if con.rhs < 0.0 {
                sign[i] = -1.0;
                r = match r {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
            }
            rel.push(r);
        }
        let n_slack = rel.iter().filter(|r| **r != Relation::Eq).count();
        let n_art = rel.iter().filter(|r| **r != Relation::Le).count();
        let cols = n + n_slack + n_art;
        let w = cols + 1;

        let mut data = vec![0.0; (m + 1) * w];
        let mut basis = vec![0; m];
        let mut is_art = vec![false; cols];
        let mut slack = n;
        let mut art = n + n_slack;
        for (i, con) in self.constraints.iter().enumerate() {
            for &(j, a) in &con.coeffs {
                data[i * w + j] += sign[i] * a;
            }
            data[i * w + cols] = sign[i] * con.rhs;
            match rel[i] {
                Relation::Le => {
                    data[i * w + slack] = 1.0;
                    basis[i] = slack;
                    slack += 1;
                }
                Relation::Ge => {
                    data[i * w + slack] = -1.0;
                    slack += 1;
                    data[i * w + art] = 1.0;
                    basis[i] = art;
                    is_art[art] = true;
                    art += 1;
                }
                Relation::Eq => {
                    data[i * w + art] = 1.0;
                    basis[i] = art;
                    is_art[art] = true;
                    art += 1;
                }
            }
        }
        // Standard-form columns, kept for the dual solve at the end.
        let std_cols: Vec<f64> = data.clone();

        let mut tab = Tableau {
            rows: m,
            cols,
            data,
            basis,
        };
        let mut pivots = 0;

        if n_art > 0 {
            let phase1: Vec<f64> = is_art.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
            tab.price(&phase1);
            let everything = vec![true; cols];
            tab.optimize(&everything, &mut pivots)?;
            let residual: f64 = (0..m)
                .filter(|&r| is_art[tab.basis[r]])
                .map(|r| tab.rhs(r).abs())
                .sum();
            let scale = 1.0
                + self
                    .constraints
                    .iter()
                    .map(|c| c.rhs.abs())
                    .fold(0.0, f64::max);
            if residual > FEAS_TOL * scale {
                return Err(LpError::Infeasible(residual));
            }
            // Drive zero-level artificials out where a structural pivot exists.
            for r in 0..m {
                if is_art[tab.basis[r]] {
                    if let Some(c) = (0..cols).find(|&c| !is_art[c] && tab.at(r, c).abs() > 1e-9) {
                        tab.pivot(r, c);
                        pivots += 1;
                    }
                }
            }
        }

        let mut cost = vec![0.0; cols];
        cost[..n].copy_from_slice(&self.objective);
        tab.price(&cost);
        let allowed: Vec<bool> = is_art.iter().map(|a| !a).collect();
        tab.optimize(&allowed, &mut pivots)?;

        let mut x = vec![0.0; n];
        for r in 0..m {
            let b = tab.basis[r];
            if b < n {
                x[b] = tab.rhs(r).max(0.0);
            }
        }
        let objective: f64 = x.iter().zip(&self.objective).map(|(a, b)| a * b).sum();

        // y solves B^T y = c_B on the oriented standard form.
        let bmat = DMatrix::from_fn(m, m, |i, k| std_cols[i * w + tab.basis[k]]);
        let cb = DVector::from_iterator(m, tab.basis.iter().map(|&b| cost[b]));
        let y = bmat
            .transpose()
            .lu()
            .solve(&cb)
            .ok_or(LpError::SingularBasis)?;
        let duals: Vec<f64> = (0..m).map(|i| sign[i] * y[i]).collect();
        let reduced_costs: Vec<f64> = (0..n)
            .map(|j| {
                let ya: f64 = (0..m).map(|i| y[i] * std_cols[i * w + j]).sum();
                self.objective[j] - ya
            })
            .collect();

        Ok(LpSolution {
            x,
            objective,
            duals,
            reduced_costs,
            pivots,
        })
    }
}
