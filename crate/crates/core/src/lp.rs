//! Dense revised simplex for small equality-form linear programs
//!
//! ```text
//! minimize c.x  subject to  A x = b,  x >= 0
//! ```
//!
//! Two phases with one artificial per row, Bland's smallest-index rule for
//! both the entering and leaving variable, and an explicit basis inverse that
//! is rebuilt from scratch every [`REFACTOR_EVERY`] pivots. Redundant rows are
//! tolerated: their artificial stays basic at zero level.

use crate::error::{Error, Result};

const REFACTOR_EVERY: usize = 50;
const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 200_000;

/// `minimize costs.x` s.t. each row `sum_k coef_k x_{var_k} = rhs`, `x >= 0`.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    num_vars: usize,
    costs: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl LinearProgram {
    pub fn new(costs: Vec<f64>) -> Self {
        Self {
            num_vars: costs.len(),
            costs,
            rows: Vec::new(),
            rhs: Vec::new(),
        }
    }

    /// Adds an equality row given as sparse `(variable, coefficient)` pairs.
    /// Repeated variables are summed.
    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> Result<()> {
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        let mut sorted = terms;
        sorted.sort_by_key(|t| t.0);
        for (var, coef) in sorted {
            if var >= self.num_vars {
                return Err(Error::InvalidArgument(format!("variable {var} out of range")));
            }
            match merged.last_mut() {
                Some(last) if last.0 == var => last.1 += coef,
                _ => merged.push((var, coef)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.rows.push(merged);
        self.rhs.push(rhs);
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_constraints(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

struct Simplex {
    m: usize,
    n: usize,
    /// Sparse columns of `[A | I]` after sign normalization of rows.
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    /// Row-major `m x m` basis inverse.
    binv: Vec<f64>,
    xb: Vec<f64>,
    pivots: usize,
    since_refactor: usize,
}

impl Simplex {
    fn new(lp: &LinearProgram) -> Self {
        let m = lp.rows.len();
        let n = lp.num_vars;
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n + m];
        let mut b = lp.rhs.clone();
        for (r, row) in lp.rows.iter().enumerate() {
            let sign = if b[r] < 0.0 { -1.0 } else { 1.0 };
            b[r] *= sign;
            for &(var, coef) in row {
                cols[var].push((r, sign * coef));
            }
            cols[n + r].push((r, 1.0));
        }
        let mut binv = vec![0.0; m * m];
        for r in 0..m {
            binv[r * m + r] = 1.0;
        }
        let mut is_basic = vec![false; n + m];
        for r in 0..m {
            is_basic[n + r] = true;
        }
        Self {
            m,
            n,
            cols,
            xb: b.clone(),
            b,
            basis: (n..n + m).collect(),
            is_basic,
            binv,
            pivots: 0,
            since_refactor: 0,
        }
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (r, &var) in self.basis.iter().enumerate() {
            let c = cost[var];
            if c != 0.0 {
                let row = &self.binv[r * m..(r + 1) * m];
                for (yk, bk) in y.iter_mut().zip(row) {
                    *yk += c * bk;
                }
            }
        }
        y
    }

    fn column(&self, var: usize) -> Vec<f64> {
        let m = self.m;
        let mut u = vec![0.0; m];
        for &(k, a) in &self.cols[var] {
            for r in 0..m {
                u[r] += self.binv[r * m + k] * a;
            }
        }
        u
    }

    fn pivot(&mut self, row: usize, entering: usize, u: &[f64]) {
        let m = self.m;
        let piv = u[row];
        for k in 0..m {
            self.binv[row * m + k] /= piv;
        }
        self.xb[row] /= piv;
        let (head, rest) = self.binv.split_at_mut(row * m);
        let (prow, tail) = rest.split_at_mut(m);
        for r in 0..m {
            if r == row || u[r] == 0.0 {
                continue;
            }
            let factor = u[r];
            let target = if r < row {
                &mut head[r * m..(r + 1) * m]
            } else {
                let off = (r - row - 1) * m;
                &mut tail[off..off + m]
            };
            for (t, p) in target.iter_mut().zip(prow.iter()) {
                *t -= factor * p;
            }
            self.xb[r] -= factor * self.xb[row];
        }
        self.is_basic[self.basis[row]] = false;
        self.is_basic[entering] = true;
        self.basis[row] = entering;
        self.pivots += 1;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            // a failed refactor keeps the product-form inverse
            let _ = self.refactor();
        }
    }

    /// Rebuilds the basis inverse by Gauss-Jordan elimination with partial pivoting.
    fn refactor(&mut self) -> bool {
        let m = self.m;
        let w = 2 * m;
        let mut aug = vec![0.0; m * w];
        for (c, &var) in self.basis.iter().enumerate() {
            for &(r, a) in &self.cols[var] {
                aug[r * w + c] = a;
            }
        }
        for r in 0..m {
            aug[r * w + m + r] = 1.0;
        }
        for col in 0..m {
            let (mut best, mut best_abs) = (col, 0.0);
            for r in col..m {
                let v = aug[r * w + col].abs();
                if v > best_abs {
                    best = r;
                    best_abs = v;
                }
            }
            if best_abs < 1e-12 {
                return false;
            }
            if best != col {
                for k in 0..w {
                    aug.swap(best * w + k, col * w + k);
                }
            }
            let p = aug[col * w + col];
            for k in 0..w {
                aug[col * w + k] /= p;
            }
            let pivot_row: Vec<f64> = aug[col * w..(col + 1) * w].to_vec();
            for r in 0..m {
                if r == col {
                    continue;
                }
                let f = aug[r * w + col];
                if f != 0.0 {
                    for k in 0..w {
                        aug[r * w + k] -= f * pivot_row[k];
                    }
                }
            }
        }
        for r in 0..m {
            self.binv[r * m..(r + 1) * m].copy_from_slice(&aug[r * w + m..(r + 1) * w]);
        }
        for r in 0..m {
            self.xb[r] = (0..m).map(|k| self.binv[r * m + k] * self.b[k]).sum();
        }
        self.since_refactor = 0;
        true
    }

    /// Runs simplex iterations for `cost`, letting only variables `< allowed`
    /// enter the basis.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> LpStatus {
        loop {
            if self.pivots >= MAX_PIVOTS {
                return LpStatus::NumericalFailure;
            }
            let y = self.duals(cost);
            let entering = (0..allowed).find(|&j| {
                if self.is_basic[j] {
                    return false;
                }
                let reduced = cost[j] - self.cols[j].iter().map(|&(r, a)| y[r] * a).sum::<f64>();
                reduced < -COST_TOL
            });
            let Some(q) = entering else {
                return LpStatus::Optimal;
            };
            let u = self.column(q);
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.m {
                if u[r] > PIVOT_TOL {
                    let ratio = self.xb[r].max(0.0) / u[r];
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            let tie = (ratio - lratio).abs() <= 1e-12 * (1.0 + lratio.abs());
                            if ratio < lratio && !tie {
                                Some((r, ratio))
                            } else if tie && self.basis[r] < self.basis[lr] {
                                Some((r, ratio.min(lratio)))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return LpStatus::Unbounded;
            };
            self.pivot(row, q, &u);
        }
    }

    fn solution(&mut self) -> Vec<f64> {
        self.refactor();
        let mut x = vec![0.0; self.n];
        for (r, &var) in self.basis.iter().enumerate() {
            if var < self.n {
                x[var] = self.xb[r].max(0.0);
            }
        }
        x
    }
}

/// Solves a linear program in equality form.
pub fn solve(lp: &LinearProgram) -> LpSolution {
    let n = lp.num_vars;
    let m = lp.rows.len();
    let fail = |status, pivots| LpSolution {
        status,
        x: vec![0.0; n],
        objective: f64::NAN,
        pivots,
    };
    if lp.costs.iter().chain(&lp.rhs).any(|v| !v.is_finite()) {
        return fail(LpStatus::NumericalFailure, 0);
    }
    let mut s = Simplex::new(lp);

    // phase 1: minimize the sum of artificials
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|c| *c = 1.0);
    match s.optimize(&phase1, n) {
        LpStatus::Optimal => {}
        _ => return fail(LpStatus::NumericalFailure, s.pivots),
    }
    s.refactor();
    let scale = 1.0 + s.b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let infeasibility: f64 = s
        .basis
        .iter()
        .zip(&s.xb)
        .filter(|(&v, _)| v >= n)
        .map(|(_, &x)| x.max(0.0))
        .sum();
    if infeasibility > FEAS_TOL * scale {
        return fail(LpStatus::Infeasible, s.pivots);
    }

    // drive zero-level artificials out of the basis where possible
    for r in 0..m {
        if s.basis[r] < n {
            continue;
        }
        let m_ = s.m;
        let row: Vec<f64> = s.binv[r * m_..(r + 1) * m_].to_vec();
        let candidate = (0..n).find(|&j| {
            !s.is_basic[j]
                && s.cols[j].iter().map(|&(k, a)| row[k] * a).sum::<f64>().abs() > PIVOT_TOL
        });
        if let Some(j) = candidate {
            let u = s.column(j);
            s.pivot(r, j, &u);
        }
    }

    // phase 2
    let mut phase2 = vec![0.0; n + m];
    phase2[..n].copy_from_slice(&lp.costs);
    let status = s.optimize(&phase2, n);
    if status != LpStatus::Optimal {
        return fail(status, s.pivots);
    }
    let x = s.solution();
    let objective = x.iter().zip(&lp.costs).map(|(a, c)| a * c).sum();
    LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
        pivots: s.pivots,
    }
}
