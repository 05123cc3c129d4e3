//! Dense revised simplex with Bland's pivoting rule.
//!
//! Solves `min cᵀx` subject to rows `aᵢᵀx {≤,≥,=} bᵢ` and `x ≥ 0`, returning
//! the primal point, one dual value per row and the reduced costs. The basis
//! inverse is kept explicitly and refactored periodically; problem sizes in
//! this crate stay below a few hundred columns.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        Self { objective, constraints: Vec::new() }
    }

    pub fn add(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        assert_eq!(coeffs.len(), self.objective.len(), "constraint width");
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Sensitivity of the optimum to each row's right-hand side: `≥ 0` on
    /// binding `≥` rows, `≤ 0` on binding `≤` rows.
    pub duals: Vec<f64>,
    /// `c − Aᵀy`, non-negative at optimality up to the pricing tolerance.
    pub reduced_costs: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpError {
    Infeasible,
    Unbounded,
    IterationLimit,
    Singular,
}

impl fmt::Display for LpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LpError::Infeasible => "infeasible",
            LpError::Unbounded => "unbounded",
            LpError::IterationLimit => "iteration limit reached",
            LpError::Singular => "singular basis",
        };
        f.write_str(s)
    }
}

impl std::error::Error for LpError {}

const REFACTOR_EVERY: usize = 40;

#[derive(Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Original,
    Slack,
    Artificial,
}

struct Tableau {
    m: usize,
    n_orig: usize,
    /// Column-major constraint matrix including slack and artificial columns.
    a: Vec<f64>,
    kind: Vec<ColKind>,
    b: Vec<f64>,
    flip: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
    since_refactor: usize,
}

impl Tableau {
    fn new(lp: &LinearProgram) -> Self {
        let m = lp.constraints.len();
        let n_orig = lp.n_vars();
        let mut cols: Vec<(ColKind, Vec<f64>)> = Vec::with_capacity(n_orig + 2 * m);
        let mut b = Vec::with_capacity(m);
        let mut flip = Vec::with_capacity(m);
        let mut rel = Vec::with_capacity(m);
        for c in &lp.constraints {
            let f = if c.rhs < 0.0 { -1.0 } else { 1.0 };
            flip.push(f);
            b.push(f * c.rhs);
            rel.push(match (c.relation, f < 0.0) {
                (Relation::Le, true) => Relation::Ge,
                (Relation::Ge, true) => Relation::Le,
                (r, _) => r,
            });
        }
        for j in 0..n_orig {
            let col = (0..m).map(|i| flip[i] * lp.constraints[i].coeffs[j]).collect();
            cols.push((ColKind::Original, col));
        }
        let mut basis = vec![usize::MAX; m];
        for i in 0..m {
            let unit = |s: f64| {
                let mut v = vec![0.0; m];
                v[i] = s;
                v
            };
            match rel[i] {
                Relation::Le => {
                    basis[i] = cols.len();
                    cols.push((ColKind::Slack, unit(1.0)));
                }
                Relation::Ge => {
                    cols.push((ColKind::Slack, unit(-1.0)));
                    basis[i] = cols.len();
                    cols.push((ColKind::Artificial, unit(1.0)));
                }
                Relation::Eq => {
                    basis[i] = cols.len();
                    cols.push((ColKind::Artificial, unit(1.0)));
                }
            }
        }
        let n_total = cols.len();
        let mut a = Vec::with_capacity(n_total * m);
        let mut kind = Vec::with_capacity(n_total);
        for (k, col) in cols {
            kind.push(k);
            a.extend(col);
        }
        let mut in_basis = vec![false; n_total];
        for &j in &basis {
            in_basis[j] = true;
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let xb = b.clone();
        Self { m, n_orig, a, kind, b, flip, basis, in_basis, binv, xb, iterations: 0, since_refactor: 0 }
    }

    fn n_total(&self) -> usize {
        self.kind.len()
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.a[j * self.m..(j + 1) * self.m]
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (i, &bj) in self.basis.iter().enumerate() {
            let cb = cost[bj];
            if cb != 0.0 {
                let row = &self.binv[i * m..(i + 1) * m];
                for (yj, r) in y.iter_mut().zip(row) {
                    *yj += cb * r;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, cost: &[f64], y: &[f64], j: usize) -> f64 {
        cost[j] - self.col(j).iter().zip(y).map(|(a, y)| a * y).sum::<f64>()
    }

    fn direction(&self, q: usize) -> Vec<f64> {
        let m = self.m;
        let aq = self.col(q);
        (0..m).map(|i| self.binv[i * m..(i + 1) * m].iter().zip(aq).map(|(b, a)| b * a).sum()).collect()
    }

    fn pivot(&mut self, r: usize, q: usize, alpha: &[f64]) {
        let m = self.m;
        let piv = alpha[r];
        for v in &mut self.binv[r * m..(r + 1) * m] {
            *v /= piv;
        }
        self.xb[r] /= piv;
        let (row_r, xr) = (self.binv[r * m..(r + 1) * m].to_vec(), self.xb[r]);
        for i in 0..m {
            if i == r || alpha[i] == 0.0 {
                continue;
            }
            let f = alpha[i];
            for (v, rv) in self.binv[i * m..(i + 1) * m].iter_mut().zip(&row_r) {
                *v -= f * rv;
            }
            self.xb[i] -= f * xr;
        }
        for v in &mut self.xb {
            if *v < 0.0 && *v > -1e-11 {
                *v = 0.0;
            }
        }
        self.in_basis[self.basis[r]] = false;
        self.in_basis[q] = true;
        self.basis[r] = q;
        self.iterations += 1;
        self.since_refactor += 1;
    }

    /// Recomputes the basis inverse by Gauss-Jordan elimination with partial
    /// pivoting, then the basic values from it.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut bm = vec![0.0; m * m];
        for (c, &j) in self.basis.iter().enumerate() {
            for (r, v) in self.col(j).iter().enumerate() {
                bm[r * m + c] = *v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let p =
                (c..m).max_by(|&x, &y| bm[x * m + c].abs().total_cmp(&bm[y * m + c].abs())).ok_or(LpError::Singular)?;
            if bm[p * m + c].abs() < 1e-13 {
                return Err(LpError::Singular);
            }
            if p != c {
                for k in 0..m {
                    bm.swap(p * m + k, c * m + k);
                    inv.swap(p * m + k, c * m + k);
                }
            }
            let d = bm[c * m + c];
            for k in 0..m {
                bm[c * m + k] /= d;
                inv[c * m + k] /= d;
            }
            for r in 0..m {
                if r == c {
                    continue;
                }
                let f = bm[r * m + c];
                if f == 0.0 {
                    continue;
                }
                for k in 0..m {
                    bm[r * m + k] -= f * bm[c * m + k];
                    inv[r * m + k] -= f * inv[c * m + k];
                }
            }
        }
        self.binv = inv;
        self.xb = (0..m)
            .map(|i| self.binv[i * m..(i + 1) * m].iter().zip(&self.b).map(|(x, b)| x * b).sum::<f64>())
            .map(|v: f64| if v < 0.0 && v > -1e-9 { 0.0 } else { v })
            .collect();
        self.since_refactor = 0;
        Ok(())
    }

    fn run_phase(&mut self, cost: &[f64], pricing_tol: f64, max_iter: usize) -> Result<(), LpError> {
        let n_total = self.n_total();
        loop {
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
            if self.iterations >= max_iter {
                return Err(LpError::IterationLimit);
            }
            let y = self.duals(cost);
            // Bland: lowest-index improving column.
            let entering = (0..n_total).find(|&j| {
                !self.in_basis[j]
                    && self.kind[j] != ColKind::Artificial
                    && self.reduced_cost(cost, &y, j) < -pricing_tol
            });
            let Some(q) = entering else { return Ok(()) };
            let alpha = self.direction(q);
            let amax = alpha.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let piv_tol = 1e-9 * amax.max(1e-3);
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                if alpha[i] <= piv_tol {
                    continue;
                }
                let t = self.xb[i].max(0.0) / alpha[i];
                leave = match leave {
                    None => Some((i, t)),
                    Some((r, tr)) => {
                        let tie = (t - tr).abs() <= 1e-12 * (1.0 + tr.abs());
                        if t < tr && !tie || tie && self.basis[i] < self.basis[r] {
                            Some((i, t))
                        } else {
                            Some((r, tr))
                        }
                    }
                };
            }
            let Some((r, _)) = leave else { return Err(LpError::Unbounded) };
            self.pivot(r, q, &alpha);
        }
    }

    /// Pivots zero-level artificials out of the basis where some structural
    /// or slack column can replace them. Rows with no such column are
    /// redundant; their artificial stays basic at zero and never moves.
    fn expel_artificials(&mut self) {
        let m = self.m;
        for r in 0..m {
            if self.kind[self.basis[r]] != ColKind::Artificial {
                continue;
            }
            let row: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
            let candidate = (0..self.n_total()).find(|&j| {
                !self.in_basis[j]
                    && self.kind[j] != ColKind::Artificial
                    && self.col(j).iter().zip(&row).map(|(a, b)| a * b).sum::<f64>().abs() > 1e-9
            });
            if let Some(q) = candidate {
                self.xb[r] = 0.0;
                let alpha = self.direction(q);
                self.pivot(r, q, &alpha);
            }
        }
    }
}

/// Solves the program; see the module docs for the dual sign convention.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.n_vars();
    let mut t = Tableau::new(lp);
    let n_total = t.n_total();
    let max_iter = 200 * (t.m + n_total) + 1000;

    let amax = t.a.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let bmax = t.b.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));

    if t.kind.contains(&ColKind::Artificial) {
        let phase1: Vec<f64> = t.kind.iter().map(|k| if *k == ColKind::Artificial { 1.0 } else { 0.0 }).collect();
        t.run_phase(&phase1, 1e-11 * amax, max_iter)?;
        t.refactor()?;
        let infeas: f64 =
            t.basis.iter().zip(&t.xb).filter(|(j, _)| t.kind[**j] == ColKind::Artificial).map(|(_, v)| v.abs()).sum();
        if infeas > 1e-9 * bmax * (t.m as f64).max(1.0) {
            return Err(LpError::Infeasible);
        }
        t.expel_artificials();
    }

    let mut cost = vec![0.0; n_total];
    cost[..n].copy_from_slice(&lp.objective);
    let cmax = lp.objective.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let pricing_tol = 1e-12 * cmax;
    t.run_phase(&cost, pricing_tol, max_iter)?;
    t.refactor()?;
    // A refactor can expose residual improving columns; finish them off.
    t.run_phase(&cost, pricing_tol, max_iter)?;

    let mut x = vec![0.0; n];
    for (i, &j) in t.basis.iter().enumerate() {
        if j < t.n_orig {
            x[j] = t.xb[i].max(0.0);
        }
    }
    let y = t.duals(&cost);
    let reduced_costs = (0..n).map(|j| t.reduced_cost(&cost, &y, j)).collect();
    let duals = y.iter().zip(&t.flip).map(|(y, f)| y * f).collect();
    let objective = lp.objective.iter().zip(&x).map(|(c, x)| c * x).sum();
    Ok(LpSolution { x, duals, reduced_costs, objective, iterations: t.iterations })
}
