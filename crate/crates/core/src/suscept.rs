//! Finite-N susceptibility checks for smooth penalties.
//!
//! For the cost `E(x) = ‖y − Hx‖²/(2σ²) + Σ_a U(x_a)` the response matrix at
//! the optimum is `χ = (HᵀH/σ² + diag W)⁻¹` with `W_a = U''(x̂_a)`. This module
//! computes it directly and compares its diagonal average and trace against
//! the single-site resummation `χ̄ = E_w[(w + 1/(σ² + χ̄/α))⁻¹]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{derive_seed, draw_instance, PenaltyModel, SignalPrior};

/// Iteration cap for the resummed mean susceptibility.
pub const RESUM_MAX_ITER: usize = 10_000;
const RESUM_TOL: f64 = 1e-14;

/// Gradient tolerance (sup norm) for the Newton solve of the full cost.
pub const NEWTON_GRAD_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 500;

/// `(HᵀH/σ² + diag W)⁻¹` by Cholesky factorization.
pub fn exact_chi(h: &DMatrix<f64>, w_diag: &[f64], sigma2: f64) -> Result<DMatrix<f64>> {
    let n = h.ncols();
    if w_diag.len() != n {
        return domain(format!("W has {} entries, H has {n} columns", w_diag.len()));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return domain(format!("sigma2 must be positive and finite, got {sigma2}"));
    }
    if w_diag.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return domain("W entries must be finite and >= 0");
    }
    let a = hessian(&(h.transpose() * h), w_diag, sigma2);
    let chol = a.clone().cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "HᵀH/σ² + W is not positive definite (smallest W = {:e}); some direction has zero curvature",
            w_diag.iter().copied().fold(f64::INFINITY, f64::min)
        ))
    })?;
    let chi = chol.inverse();
    let mut resid = &a * &chi;
    for i in 0..n {
        resid[(i, i)] -= 1.0;
    }
    let r = resid.amax();
    if !(r <= 1e-8 * n as f64) {
        return Err(Error::Singular(format!(
            "inverse residual {r:e} exceeds {:e}; the system is numerically singular",
            1e-8 * n as f64
        )));
    }
    Ok(chi)
}

fn hessian(gram: &DMatrix<f64>, w: &[f64], sigma2: f64) -> DMatrix<f64> {
    let mut a = gram / sigma2;
    for (i, wi) in w.iter().enumerate() {
        a[(i, i)] += wi;
    }
    a
}

/// Solves `χ̄ = mean_w[(w + 1/(σ² + χ̄/α))⁻¹]` by iteration from `χ̄ = σ²`.
///
/// The map is increasing and bounded by `mean(1/w)`, so the iterates are
/// monotone.
pub fn resummed_chi_bar(w_sample: &[f64], alpha: f64, sigma2: f64) -> Result<f64> {
    if w_sample.is_empty() {
        return Err(Error::InsufficientData("empty W sample".into()));
    }
    if w_sample.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return domain("W samples must be positive and finite");
    }
    if !(alpha > 0.0 && sigma2 > 0.0 && alpha.is_finite() && sigma2.is_finite()) {
        return domain(format!("alpha and sigma2 must be positive, got {alpha}, {sigma2}"));
    }
    let map = |chi: f64| {
        let g = 1.0 / (sigma2 + chi / alpha);
        w_sample.iter().map(|w| 1.0 / (w + g)).sum::<f64>() / w_sample.len() as f64
    };
    let mut chi = sigma2;
    for _ in 0..RESUM_MAX_ITER {
        let next = map(chi);
        if (next - chi).abs() <= RESUM_TOL * next.abs() {
            return Ok(next);
        }
        chi = next;
    }
    Err(Error::Numerical(format!(
        "resummed susceptibility did not converge in {RESUM_MAX_ITER} iterations (last {chi})"
    )))
}

/// Minimizes `‖y − Hx‖²/(2σ²) + Σ U(x_a)` by damped Newton.
///
/// Sharp smoothings are reached by continuation from `ε = 1` down to the
/// target, warm-starting each stage.
pub fn minimize_full_cost(h: &DMatrix<f64>, y: &[f64], penalty: &PenaltyModel, sigma2: f64) -> Result<Vec<f64>> {
    if !penalty.is_smooth() {
        return domain(format!("{} penalty has no second derivative at 0", penalty.name()));
    }
    let y = DVector::from_column_slice(y);
    let gram = h.transpose() * h;
    let hty = h.transpose() * &y;
    let mut stages = Vec::new();
    if let PenaltyModel::SmoothedL1 { lambda, epsilon } = *penalty {
        let mut e = 1.0;
        while e > 10.0 * epsilon {
            stages.push(PenaltyModel::SmoothedL1 { lambda, epsilon: e });
            e /= 10.0;
        }
    }
    stages.push(*penalty);
    let mut x = DVector::zeros(h.ncols());
    let last = stages.len() - 1;
    for (i, stage) in stages.iter().enumerate() {
        let tol = if i == last { NEWTON_GRAD_TOL } else { 1e-6 };
        x = newton(h, &y, &gram, &hty, stage, sigma2, x, tol)?;
    }
    Ok(x.iter().copied().collect())
}

fn solve_direction(gram: &DMatrix<f64>, w: &[f64], sigma2: f64, g: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = hessian(gram, w, sigma2)
        .cholesky()
        .ok_or_else(|| Error::Numerical("Newton Hessian lost positive definiteness".into()))?;
    Ok(-chol.solve(g))
}

#[allow(clippy::too_many_arguments)]
fn newton(
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    gram: &DMatrix<f64>,
    hty: &DVector<f64>,
    penalty: &PenaltyModel,
    sigma2: f64,
    mut x: DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let cost = |x: &DVector<f64>| {
        let r = y - h * x;
        r.norm_squared() / (2.0 * sigma2) + x.iter().map(|v| penalty.value(*v)).sum::<f64>()
    };
    let grad = |x: &DVector<f64>| {
        let mut g = (gram * x - hty) / sigma2;
        for (gi, xi) in g.iter_mut().zip(x.iter()) {
            *gi += penalty.derivative(*xi);
        }
        g
    };
    let mut e = cost(&x);
    for _ in 0..NEWTON_MAX_ITER {
        let g = grad(&x);
        let gmax = g.amax();
        if gmax <= tol {
            return Ok(x);
        }
        let w: Vec<f64> = x.iter().map(|v| penalty.second_derivative(*v)).collect();
        let d = solve_direction(gram, &w, sigma2, &g)?;
        let slope = g.dot(&d);
        let trial = &x + &d;
        let et = cost(&trial);
        // Near the optimum the cost change drops below rounding, so the
        // gradient norm decides.
        let tiny = -slope <= 1e-8 * (1.0 + e.abs());
        if et <= e + 1e-4 * slope || (tiny && grad(&trial).amax() < gmax) {
            x = trial;
            e = et;
            continue;
        }
        // Full Newton step rejected: take the majorizing step with weights
        // U'(x)/x, which never increases the cost.
        let w: Vec<f64> = x
            .iter()
            .map(|v| {
                if *v == 0.0 {
                    penalty.second_derivative(0.0)
                } else {
                    penalty.derivative(*v) / v
                }
            })
            .collect();
        let d = solve_direction(gram, &w, sigma2, &g)?;
        let slope = g.dot(&d);
        let mut t = 1.0;
        loop {
            let trial = &x + &d * t;
            let et = cost(&trial);
            if et <= e + 1e-4 * t * slope {
                x = trial;
                e = et;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::Numerical(format!("Newton line search stalled at gradient {gmax:e}")));
            }
        }
    }
    Err(Error::Numerical(format!("Newton did not reach gradient {tol:e} in {NEWTON_MAX_ITER} steps")))
}

/// Inputs of one susceptibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SusceptibilityConfig {
    pub n: usize,
    pub m: usize,
    pub penalty: PenaltyModel,
    pub prior: SignalPrior,
    pub sigma2: f64,
    #[serde(default)]
    pub noise_var: f64,
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
}

/// One seed's measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub diag_mean: f64,
    pub chi_bar_resummed: f64,
    pub offdiag_rms: f64,
    pub self_energy: f64,
    pub trace_lhs: f64,
    pub trace_rhs: f64,
    /// Curvatures `U''(x̂_a)`.
    #[serde(skip)]
    pub w: Vec<f64>,
    /// Diagonal of the exact χ.
    #[serde(skip)]
    pub chi_diag: Vec<f64>,
    #[serde(skip)]
    pub x_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityReport {
    pub n: usize,
    pub m: usize,
    pub chi_matrix_diag_mean: f64,
    /// Resummed `χ̄` on the pooled empirical `W` of all seeds.
    pub chi_bar_resummed: f64,
    pub offdiag_rms: f64,
    pub self_energy: f64,
    pub trace_identity_lhs: f64,
    pub trace_identity_rhs: f64,
    pub rows: Vec<SeedRow>,
    pub skipped: Vec<(u64, String)>,
}

impl SusceptibilityReport {
    pub fn diag_rel_err(&self) -> f64 {
        (self.chi_matrix_diag_mean - self.chi_bar_resummed).abs() / self.chi_bar_resummed
    }

    pub fn trace_rel_err(&self) -> f64 {
        (self.trace_identity_lhs - self.trace_identity_rhs).abs() / self.trace_identity_rhs
    }
}

/// Exact-χ analysis of a single instance seed.
pub fn analyse_seed(cfg: &SusceptibilityConfig, seed: u64) -> Result<SeedRow> {
    let inst = draw_instance(cfg.n, cfg.m, &cfg.prior, cfg.noise_var, seed)?;
    let h = inst.h_matrix();
    let x_hat = minimize_full_cost(&h, &inst.y, &cfg.penalty, cfg.sigma2)?;
    let w: Vec<f64> = x_hat.iter().map(|x| cfg.penalty.second_derivative(*x)).collect();
    let chi = exact_chi(&h, &w, cfg.sigma2)?;

    let (n, m) = (cfg.n as f64, cfg.m as f64);
    let alpha = m / n;
    let chi_diag: Vec<f64> = chi.diagonal().iter().copied().collect();
    let trace = chi_diag.iter().sum::<f64>();
    let diag_mean = trace / n;
    let total_sq = chi.norm_squared();
    let diag_sq: f64 = chi_diag.iter().map(|c| c * c).sum();
    let offdiag_rms = if cfg.n > 1 {
        ((total_sq - diag_sq).max(0.0) / (n * (n - 1.0))).sqrt()
    } else {
        0.0
    };
    let self_energy = -1.0 / cfg.sigma2 / (1.0 + trace / (m * cfg.sigma2));
    // Tr(HᵀHχ) = Σ_ab (HᵀH)_ab χ_ba with both matrices symmetric.
    let gram = h.transpose() * &h;
    let trace_lhs = gram.component_mul(&chi).sum();
    let trace_rhs = m * cfg.sigma2 * diag_mean / (alpha * cfg.sigma2 + diag_mean);
    let chi_bar_resummed = resummed_chi_bar(&w, alpha, cfg.sigma2)?;
    Ok(SeedRow {
        seed,
        n: cfg.n,
        m: cfg.m,
        diag_mean,
        chi_bar_resummed,
        offdiag_rms,
        self_energy,
        trace_lhs,
        trace_rhs,
        w,
        chi_diag,
        x_hat,
    })
}

/// Runs [`analyse_seed`] over `cfg.seeds` derived seeds and aggregates.
///
/// Seeds whose optimization or factorization fails are skipped and listed.
pub fn verify_identities(cfg: &SusceptibilityConfig) -> Result<SusceptibilityReport> {
    if !cfg.penalty.is_smooth() {
        return domain(format!("susceptibility check needs a smooth penalty, got {}", cfg.penalty.name()));
    }
    if cfg.m == 0 || cfg.n == 0 || cfg.seeds == 0 {
        return domain("N, M and seeds must be positive");
    }
    let outcomes: Vec<(u64, Result<SeedRow>)> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(cfg.seed, 0, i);
            (s, analyse_seed(cfg, s))
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in outcomes {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => skipped.push((s, e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("all {} seeds failed", cfg.seeds)));
    }
    let k = rows.len() as f64;
    let avg = |f: fn(&SeedRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    let pooled_w: Vec<f64> = rows.iter().flat_map(|r| r.w.iter().copied()).collect();
    let alpha = cfg.m as f64 / cfg.n as f64;
    Ok(SusceptibilityReport {
        n: cfg.n,
        m: cfg.m,
        chi_matrix_diag_mean: avg(|r| r.diag_mean),
        chi_bar_resummed: resummed_chi_bar(&pooled_w, alpha, cfg.sigma2)?,
        offdiag_rms: avg(|r| r.offdiag_rms),
        self_energy: avg(|r| r.self_energy),
        trace_identity_lhs: avg(|r| r.trace_lhs),
        trace_identity_rhs: avg(|r| r.trace_rhs),
        rows,
        skipped,
    })
}

/// Least-squares slope of `log rms` against `log M`.
pub fn offdiag_scaling_exponent(reports: &[SusceptibilityReport]) -> Result<f64> {
    if reports.len() < 2 {
        return Err(Error::InsufficientData("scaling fit needs at least two sizes".into()));
    }
    let pts: Vec<(f64, f64)> = reports.iter().map(|r| ((r.m as f64).ln(), r.offdiag_rms.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("scaling fit needs distinct M".into()));
    }
    Ok(sxy / sxx)
}
