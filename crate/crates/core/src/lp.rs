//! Dense revised simplex for (perturbed) basis pursuit.
//!
//! `min ‖x‖₁ − f·x_a  s.t.  H·x = y` is solved in standard form by splitting
//! `x = x⁺ − x⁻` with `x± ≥ 0`. Split column `j < N` is `x⁺_j`, column
//! `N + j` is `x⁻_j`; the cost is 1 everywhere except `1 − f` on `x⁺_a` and
//! `1 + f` on `x⁻_a`.
//!
//! The solver always returns a basic (vertex) solution, which is what makes
//! the response of a coordinate to `f` piecewise constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Reduced costs above `-OPT_TOL` count as nonnegative.
pub const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 50;

/// A basis-pursuit program, optionally with a linear field on one node.
#[derive(Debug, Clone, Copy)]
pub struct BasisPursuitLp<'a> {
    /// `M × N` measurement matrix.
    pub h: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub perturb_node: Option<usize>,
    pub f: f64,
}

impl<'a> BasisPursuitLp<'a> {
    pub fn new(h: &'a DMatrix<f64>, y: &'a [f64]) -> Self {
        Self {
            h,
            y,
            perturb_node: None,
            f: 0.0,
        }
    }

    pub fn perturbed(h: &'a DMatrix<f64>, y: &'a [f64], node: usize, f: f64) -> Self {
        Self {
            h,
            y,
            perturb_node: Some(node),
            f,
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = self.h.shape();
        if self.y.len() != m {
            return domain(format!("y has length {}, expected {m}", self.y.len()));
        }
        if m > n {
            return domain(format!("basis pursuit needs M <= N, got M={m}, N={n}"));
        }
        if let Some(a) = self.perturb_node {
            if a >= n {
                return domain(format!("perturbed node {a} out of range 0..{n}"));
            }
            if !(self.f.abs() < 1.0) {
                return domain(format!("|f| must be < 1 for a bounded program, got f={}", self.f));
            }
        }
        Ok(())
    }

    /// Cost of split column `j`.
    pub fn split_cost(&self, j: usize) -> f64 {
        let n = self.h.ncols();
        match self.perturb_node {
            Some(a) if j == a => 1.0 - self.f,
            Some(a) if j == n + a => 1.0 + self.f,
            _ => 1.0,
        }
    }

    /// `‖x‖₁ − f·x_a`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        match self.perturb_node {
            Some(a) => l1 - self.f * x[a],
            None => l1,
        }
    }

    /// Default feasibility tolerance `10⁻⁹·‖y‖∞`, floored at `10⁻¹²`.
    pub fn default_feas_tol(&self) -> f64 {
        let ymax = self.y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        (1e-9 * ymax).max(1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub x_hat: Vec<f64>,
    pub objective: f64,
    /// Basic split columns (sorted); artificial columns are omitted.
    pub basis: Vec<usize>,
    pub status: LpStatus,
    pub iterations: usize,
    /// Smallest reduced cost over nonbasic split columns at termination.
    pub min_reduced_cost: f64,
}

/// Cold-start solve.
pub fn solve_bp(problem: &BasisPursuitLp<'_>, feas_tol: f64) -> Result<LpSolution> {
    problem.validate()?;
    let mut s = Simplex::new(problem, feas_tol);
    s.cold_start()
}

/// Solve starting from `prior_basis`; falls back to a cold start when the
/// basis is singular, has the wrong size, or is primal infeasible.
pub fn solve_bp_warm(problem: &BasisPursuitLp<'_>, prior_basis: &[usize], feas_tol: f64) -> Result<LpSolution> {
    problem.validate()?;
    let mut s = Simplex::new(problem, feas_tol);
    if s.install_basis(prior_basis) {
        s.phase_two()
    } else {
        let mut s = Simplex::new(problem, feas_tol);
        s.cold_start()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pricing {
    Dantzig,
    Bland,
}

struct Simplex<'p, 'a> {
    lp: &'p BasisPursuitLp<'a>,
    m: usize,
    n: usize,
    /// Row sign making the right-hand side nonnegative.
    sign: Vec<f64>,
    rhs: DVector<f64>,
    feas_tol: f64,
    /// Basic column per row; columns `>= 2N` are artificials.
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    binv: DMatrix<f64>,
    xb: Vec<f64>,
    iterations: usize,
    since_refactor: usize,
    bland_after: usize,
    max_iter: usize,
}

impl<'p, 'a> Simplex<'p, 'a> {
    fn new(lp: &'p BasisPursuitLp<'a>, feas_tol: f64) -> Self {
        let (m, n) = lp.h.shape();
        let sign: Vec<f64> = lp.y.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
        let rhs = DVector::from_iterator(m, lp.y.iter().zip(&sign).map(|(v, s)| v * s));
        Self {
            lp,
            m,
            n,
            sign,
            rhs,
            feas_tol,
            basis: Vec::new(),
            is_basic: vec![false; 2 * n + m],
            binv: DMatrix::identity(m, m),
            xb: vec![0.0; m],
            iterations: 0,
            since_refactor: 0,
            bland_after: 3 * (n + m),
            max_iter: 50 * (2 * n + m) + 1000,
        }
    }

    fn ncols(&self) -> usize {
        2 * self.n + self.m
    }

    fn is_artificial(&self, j: usize) -> bool {
        j >= 2 * self.n
    }

    /// Column `j` of the sign-adjusted constraint matrix.
    fn column(&self, j: usize) -> DVector<f64> {
        if self.is_artificial(j) {
            let mut e = DVector::zeros(self.m);
            e[j - 2 * self.n] = 1.0;
            return e;
        }
        let (col, neg) = if j < self.n { (j, 1.0) } else { (j - self.n, -1.0) };
        DVector::from_iterator(self.m, self.lp.h.column(col).iter().zip(&self.sign).map(|(h, s)| neg * s * h))
    }

    fn cost(&self, j: usize, phase_one: bool) -> f64 {
        match (phase_one, self.is_artificial(j)) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => 0.0,
            (false, false) => self.lp.split_cost(j),
        }
    }

    fn set_basis(&mut self, basis: Vec<usize>) {
        self.is_basic.iter_mut().for_each(|b| *b = false);
        for &j in &basis {
            self.is_basic[j] = true;
        }
        self.basis = basis;
    }

    /// Rebuilds `B⁻¹` by LU and recomputes the basic values.
    fn refactor(&mut self) -> bool {
        let mut b = DMatrix::zeros(self.m, self.m);
        for (r, &j) in self.basis.iter().enumerate() {
            b.set_column(r, &self.column(j));
        }
        let lu = b.lu();
        let diag = lu.u().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
        if !(lo > 1e-12 * hi.max(1.0)) {
            return false;
        }
        match lu.try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => {
                self.binv = inv;
                let x = &self.binv * &self.rhs;
                self.xb = x.iter().copied().collect();
                self.since_refactor = 0;
                true
            }
            _ => false,
        }
    }

    fn cold_start(&mut self) -> Result<LpSolution> {
        let art: Vec<usize> = (0..self.m).map(|i| 2 * self.n + i).collect();
        self.set_basis(art);
        self.binv = DMatrix::identity(self.m, self.m);
        self.xb = self.rhs.iter().copied().collect();
        self.since_refactor = 0;

        if !self.iterate(true)? {
            return Err(Error::Numerical("phase one reported an unbounded ray".into()));
        }
        let infeas = self
            .basis
            .iter()
            .zip(&self.xb)
            .filter(|(j, _)| self.is_artificial(**j))
            .fold(0.0_f64, |m, (_, v)| m.max(*v));
        if infeas > self.feas_tol {
            return Ok(self.terminal(LpStatus::Infeasible));
        }
        self.drive_out_artificials();
        self.phase_two()
    }

    /// Pivots zero-valued artificials out of the basis where some structural
    /// column has a nonzero entry in their row; the rest mark redundant rows.
    fn drive_out_artificials(&mut self) {
        for r in 0..self.m {
            if !self.is_artificial(self.basis[r]) {
                continue;
            }
            let row: DVector<f64> = DVector::from_iterator(self.m, self.binv.row(r).iter().zip(&self.sign).map(|(b, s)| b * s));
            let z = self.lp.h.tr_mul(&row);
            let best = (0..self.n)
                .filter(|&j| !self.is_basic[j] && !self.is_basic[j + self.n])
                .max_by(|&a, &b| z[a].abs().partial_cmp(&z[b].abs()).unwrap());
            if let Some(j) = best {
                if z[j].abs() > PIVOT_TOL {
                    self.xb[r] = 0.0;
                    let w = &self.binv * self.column(j);
                    self.pivot(r, j, &w);
                }
            }
        }
    }

    fn phase_two(&mut self) -> Result<LpSolution> {
        if self.iterate(false)? {
            Ok(self.optimal())
        } else {
            Ok(self.terminal(LpStatus::Unbounded))
        }
    }

    /// Warm-start basis check. Returns false when it cannot be used.
    fn install_basis(&mut self, prior: &[usize]) -> bool {
        if prior.len() != self.m {
            return false;
        }
        let mut seen = vec![false; 2 * self.n];
        for &j in prior {
            if j >= 2 * self.n || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        self.set_basis(prior.to_vec());
        if !self.refactor() {
            return false;
        }
        if self.xb.iter().any(|v| *v < -self.feas_tol) {
            return false;
        }
        for v in self.xb.iter_mut() {
            *v = v.max(0.0);
        }
        true
    }

    /// Reduced costs of all columns (basic ones are ~0).
    fn reduced_costs(&self, phase_one: bool) -> Vec<f64> {
        let cb = DVector::from_iterator(self.m, self.basis.iter().map(|&j| self.cost(j, phase_one)));
        let dual = self.binv.tr_mul(&cb);
        let signed = DVector::from_iterator(self.m, dual.iter().zip(&self.sign).map(|(d, s)| d * s));
        let z = self.lp.h.tr_mul(&signed);
        let mut d = Vec::with_capacity(self.ncols());
        for j in 0..self.n {
            d.push(self.cost(j, phase_one) - z[j]);
        }
        for j in 0..self.n {
            d.push(self.cost(self.n + j, phase_one) + z[j]);
        }
        for i in 0..self.m {
            d.push(self.cost(2 * self.n + i, phase_one) - dual[i]);
        }
        d
    }

    /// Runs simplex iterations. Returns `Ok(false)` on an unbounded ray.
    fn iterate(&mut self, phase_one: bool) -> Result<bool> {
        loop {
            if self.iterations >= self.max_iter {
                return Err(Error::Numerical(format!(
                    "simplex iteration cap {} exceeded (M={}, N={})",
                    self.max_iter, self.m, self.n
                )));
            }
            let pricing = if self.iterations >= self.bland_after {
                Pricing::Bland
            } else {
                Pricing::Dantzig
            };
            let d = self.reduced_costs(phase_one);
            let eligible = |j: usize| !self.is_basic[j] && (phase_one || !self.is_artificial(j)) && d[j] < -OPT_TOL;
            let entering = match pricing {
                Pricing::Bland => (0..self.ncols()).find(|&j| eligible(j)),
                Pricing::Dantzig => (0..self.ncols())
                    .filter(|&j| eligible(j))
                    .min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()),
            };
            let Some(q) = entering else {
                if self.since_refactor > 0 {
                    // Confirm optimality on a fresh factorization.
                    if !self.refactor() {
                        return Err(Error::Singular("basis became singular during refactorization".into()));
                    }
                    self.clean_basic_values()?;
                    continue;
                }
                return Ok(true);
            };

            let w = &self.binv * self.column(q);
            let Some(r) = self.ratio_test(&w, pricing) else {
                return Ok(false);
            };
            self.pivot(r, q, &w);
            self.iterations += 1;
            if self.since_refactor >= REFACTOR_EVERY {
                if !self.refactor() {
                    return Err(Error::Singular("basis became singular during refactorization".into()));
                }
                self.clean_basic_values()?;
            }
        }
    }

    fn clean_basic_values(&mut self) -> Result<()> {
        let scale = self.rhs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for v in self.xb.iter_mut() {
            if *v < 0.0 {
                if *v < -1e-7 * scale {
                    return Err(Error::Numerical(format!("basic variable drifted to {v:e} after refactorization")));
                }
                *v = 0.0;
            }
        }
        Ok(())
    }

    fn ratio_test(&self, w: &DVector<f64>, pricing: Pricing) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.m {
            if w[i] > PIVOT_TOL {
                let ratio = self.xb[i].max(0.0) / w[i];
                best = match best {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br);
                        if ratio < br && !tie {
                            Some((i, ratio))
                        } else if tie {
                            let better = match pricing {
                                Pricing::Bland => self.basis[i] < self.basis[bi],
                                Pricing::Dantzig => w[i] > w[bi],
                            };
                            if better {
                                Some((i, ratio.min(br)))
                            } else {
                                Some((bi, ratio.min(br)))
                            }
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
        }
        best.map(|(i, _)| i)
    }

    /// Replaces the basic column of row `r` by `q`, with `w = B⁻¹ a_q`.
    fn pivot(&mut self, r: usize, q: usize, w: &DVector<f64>) {
        let theta = self.xb[r] / w[r];
        for i in 0..self.m {
            if i != r {
                self.xb[i] -= theta * w[i];
                if self.xb[i] < 0.0 && self.xb[i] > -1e-12 {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;

        let pr = w[r];
        let mut row_r: Vec<f64> = self.binv.row(r).iter().map(|v| v / pr).collect();
        for v in row_r.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let wi = w[i];
            if wi != 0.0 {
                for (k, rk) in row_r.iter().enumerate() {
                    self.binv[(i, k)] -= wi * rk;
                }
            }
        }
        for (k, rk) in row_r.into_iter().enumerate() {
            self.binv[(r, k)] = rk;
        }

        let leaving = self.basis[r];
        self.is_basic[leaving] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
        self.since_refactor += 1;
    }

    /// Basic values from a fresh factorization of the basis in sorted column
    /// order, so that equal bases give bit-identical vertices.
    fn canonical_values(&self) -> Option<(Vec<usize>, Vec<f64>)> {
        let mut cols = self.basis.clone();
        cols.sort_unstable();
        let mut b = DMatrix::zeros(self.m, self.m);
        for (r, &j) in cols.iter().enumerate() {
            b.set_column(r, &self.column(j));
        }
        let xb = b.lu().solve(&self.rhs)?;
        if !xb.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some((cols, xb.iter().map(|v| v.max(0.0)).collect()))
    }

    fn split_values(&self) -> Vec<f64> {
        let (basis, xb) = self
            .canonical_values()
            .unwrap_or_else(|| (self.basis.clone(), self.xb.clone()));
        let mut x = vec![0.0; self.n];
        for (&j, &v) in basis.iter().zip(&xb) {
            if j < self.n {
                x[j] += v;
            } else if j < 2 * self.n {
                x[j - self.n] -= v;
            }
        }
        x
    }

    fn structural_basis(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.basis.iter().copied().filter(|&j| !self.is_artificial(j)).collect();
        b.sort_unstable();
        b
    }

    fn optimal(&self) -> LpSolution {
        let x_hat = self.split_values();
        let d = self.reduced_costs(false);
        let min_rc = (0..2 * self.n)
            .filter(|&j| !self.is_basic[j])
            .map(|j| d[j])
            .fold(f64::INFINITY, f64::min);
        LpSolution {
            objective: self.lp.objective(&x_hat),
            x_hat,
            basis: self.structural_basis(),
            status: LpStatus::Optimal,
            iterations: self.iterations,
            min_reduced_cost: if min_rc.is_finite() { min_rc } else { 0.0 },
        }
    }

    fn terminal(&self, status: LpStatus) -> LpSolution {
        LpSolution {
            x_hat: vec![0.0; self.n],
            objective: match status {
                LpStatus::Unbounded => f64::NEG_INFINITY,
                _ => f64::INFINITY,
            },
            basis: self.structural_basis(),
            status,
            iterations: self.iterations,
            min_reduced_cost: 0.0,
        }
    }
}

/// `‖H·x − y‖∞`.
pub fn residual_inf(h: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let hx = h * DVector::from_column_slice(x);
    hx.iter().zip(y).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{draw_instance, SignalPrior};

    fn random_problem(n: usize, m: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let inst = draw_instance(n, m, &SignalPrior::standard(0.3).unwrap(), 0.0, seed).unwrap();
        (inst.h_matrix(), inst.y)
    }

    #[test]
    fn square_system_recovers_unique_point() {
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -1.0, 1.0, 0.3, 0.2, 0.0, 1.5]);
        let x = [0.7, -1.2, 0.4];
        let y: Vec<f64> = (h.clone() * DVector::from_column_slice(&x)).iter().copied().collect();
        let sol = solve_bp(&BasisPursuitLp::new(&h, &y), 1e-12).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        for (a, b) in sol.x_hat.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_unit_field() {
        let (h, y) = random_problem(8, 4, 1);
        let lp = BasisPursuitLp::perturbed(&h, &y, 2, 1.0);
        assert!(matches!(solve_bp(&lp, 1e-9), Err(Error::Domain(_))));
        let lp = BasisPursuitLp::perturbed(&h, &y, 9, 0.1);
        assert!(solve_bp(&lp, 1e-9).is_err());
    }

    #[test]
    fn infeasible_detected() {
        // Two identical rows with different right-hand sides.
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 1.0, 2.0, -1.0]);
        let y = [1.0, 2.0];
        let sol = solve_bp(&BasisPursuitLp::new(&h, &y), 1e-9).unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let h = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, -1.0, 0.5, 1.0, 2.0, -1.0, 0.5, 0.0, 1.0, 1.0, -2.0]);
        let x = [0.0, 1.0, 0.0, 0.5];
        let y: Vec<f64> = (h.clone() * DVector::from_column_slice(&x)).iter().copied().collect();
        let sol = solve_bp(&BasisPursuitLp::new(&h, &y), 1e-10).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!(residual_inf(&h, &sol.x_hat, &y) < 1e-10);
    }

    #[test]
    fn optimality_certificate_and_vertex_property() {
        for seed in 0..20 {
            let (h, y) = random_problem(40, 20, seed);
            let lp = BasisPursuitLp::new(&h, &y);
            let tol = lp.default_feas_tol();
            let sol = solve_bp(&lp, tol).unwrap();
            assert_eq!(sol.status, LpStatus::Optimal);
            assert!(sol.min_reduced_cost >= -OPT_TOL);
            assert!(residual_inf(&h, &sol.x_hat, &y) <= tol);
            let nnz = sol.x_hat.iter().filter(|v| v.abs() > tol).count();
            assert!(nnz <= 20);
        }
    }

    #[test]
    fn tiny_field_keeps_basis() {
        let (h, y) = random_problem(30, 15, 5);
        let base = solve_bp(&BasisPursuitLp::new(&h, &y), 1e-10).unwrap();
        let tiny = solve_bp(&BasisPursuitLp::perturbed(&h, &y, 3, 1e-9), 1e-10).unwrap();
        assert_eq!(base.basis, tiny.basis);
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let (h, y) = random_problem(30, 12, 9);
        let base = solve_bp(&BasisPursuitLp::new(&h, &y), 1e-10).unwrap();
        for &f in &[0.01, -0.3, 0.6] {
            let lp = BasisPursuitLp::perturbed(&h, &y, 4, f);
            let cold = solve_bp(&lp, 1e-10).unwrap();
            let warm = solve_bp_warm(&lp, &base.basis, 1e-10).unwrap();
            assert!(warm.objective <= cold.objective + 1e-10);
            assert!((warm.objective - cold.objective).abs() < 1e-10);
        }
        // A malformed basis falls back to a cold start.
        let lp = BasisPursuitLp::new(&h, &y);
        let bad = solve_bp_warm(&lp, &[0, 0, 1], 1e-10).unwrap();
        assert!((bad.objective - base.objective).abs() < 1e-10);
    }

    #[test]
    fn duplicated_columns_terminate() {
        let (h0, _) = random_problem(6, 4, 11);
        let mut h = DMatrix::zeros(4, 12);
        for j in 0..6 {
            h.set_column(2 * j, &h0.column(j));
            h.set_column(2 * j + 1, &h0.column(j));
        }
        let x: Vec<f64> = (0..12).map(|j| if j % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (h.clone() * DVector::from_column_slice(&x)).iter().copied().collect();
        let sol = solve_bp(&BasisPursuitLp::new(&h, &y), 1e-10).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!(residual_inf(&h, &sol.x_hat, &y) < 1e-10);
    }
}
