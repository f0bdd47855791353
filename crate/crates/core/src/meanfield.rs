//! Zero-temperature self-consistency for the order parameters `(q, χ̄)`.
//!
//! Given `(q, χ̄)` the decoupled coordinate sees
//! `σ_eff² = σ² + χ̄/α` and a Gaussian cavity field of variance
//! `σ_ξ² = q/α + σ_ζ²`; averaging `û²` and `χ_local` over the field and the
//! prior gives the next `(q, χ̄)`.
//!
//! Since the minimizer depends on `x0` and `ξ` only through `w = x0 + ξ`, each
//! branch of the prior reduces to a one-dimensional Gaussian integral over
//! `w`. On the nonzero branch `x0 | w` is Gaussian with mean `k·w` and variance
//! `c`, so `E[û² | w] = (x̂(w) − k·w)² + c`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{EnsembleParams, PenaltyModel, SignalPrior};
use crate::quad::{gaussian_expectation, normal_pdf, normal_tail, QuadratureOptions};

/// Order parameters together with the derived effective variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    /// Mean squared error.
    pub q: f64,
    /// Average local susceptibility.
    pub chi_bar: f64,
    pub sigma_eff2: f64,
    pub sigma_xi2: f64,
    /// Effective soft threshold `λσ_eff²` (L1-type penalties; 0 for ridge).
    pub theta: f64,
}

impl MeanFieldState {
    /// Finite-σ state from `(q, χ̄)`.
    pub fn from_order_parameters(q: f64, chi_bar: f64, params: &EnsembleParams, penalty: &PenaltyModel) -> Self {
        let sigma_eff2 = params.sigma2 + chi_bar / params.alpha;
        let theta = match penalty {
            PenaltyModel::Ridge { .. } => 0.0,
            _ => penalty.lambda() * sigma_eff2,
        };
        Self {
            q,
            chi_bar,
            sigma_eff2,
            sigma_xi2: q / params.alpha + params.sigma_zeta2,
            theta,
        }
    }

    /// Default starting point: `q` at the prior second moment and `χ̄` from
    /// the ridge response at `σ_eff² = σ²`.
    pub fn initial(params: &EnsembleParams, penalty: &PenaltyModel, prior: &SignalPrior) -> Self {
        let s = params.sigma2;
        let chi = s / (1.0 + penalty.lambda() * s);
        Self::from_order_parameters(prior.second_moment(), chi, params, penalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub state: MeanFieldState,
    pub iterations: usize,
    /// `max(|Δq|/max(q, δ), |Δχ̄|/max(χ̄, δ))` of the last sweep.
    pub residual: f64,
    pub converged: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub alpha: f64,
    pub rho: f64,
    pub q: f64,
    pub chi_bar: f64,
    pub recovered: bool,
}

/// Floor used in relative residuals.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// `q` below `RECOVERY_FACTOR · E[x0²]` counts as perfect recovery.
pub const RECOVERY_FACTOR: f64 = 1e-8;

pub fn recovery_threshold(prior: &SignalPrior) -> f64 {
    RECOVERY_FACTOR * prior.second_moment()
}

/// Closed-form L1 moments for one Gaussian branch `w ~ N(0, S²)` with
/// `x0 | w ~ N(k·w, c)`.
struct L1Branch {
    /// `P(|w| > θ)`
    active: f64,
    /// `E[(η(w; θ) − x0)²]`
    mse: f64,
}

fn l1_branch(theta: f64, var_w: f64, k: f64, c: f64) -> L1Branch {
    if var_w == 0.0 {
        // w ≡ 0 sits on the zero branch of the threshold.
        return L1Branch { active: 0.0, mse: c };
    }
    let s = var_w.sqrt();
    let a = theta / s;
    let tail = normal_tail(a);
    let pdf = normal_pdf(a);
    // E[w² 1{|w| ≤ θ}], E[|w| 1{|w| > θ}], E[w² 1{|w| > θ}]
    let inner_sq = var_w * (1.0 - 2.0 * tail - 2.0 * a * pdf).max(0.0);
    let outer_abs = 2.0 * s * pdf;
    let outer_sq = 2.0 * var_w * (a * pdf + tail);
    let b = 1.0 - k;
    let active_part = b * b * outer_sq - 2.0 * b * theta * outer_abs + 2.0 * theta * theta * tail;
    L1Branch {
        active: 2.0 * tail,
        mse: k * k * inner_sq + active_part.max(0.0) + c,
    }
}

/// Closed-form `(q, χ̄/σ_eff², active fraction)` for soft thresholding at `θ`
/// with cavity variance `sigma_xi2`.
fn l1_closed_form(theta: f64, sigma_xi2: f64, prior: &SignalPrior) -> (f64, f64) {
    let zero = l1_branch(theta, sigma_xi2, 0.0, 0.0);
    let mut q = (1.0 - prior.rho) * zero.mse;
    let mut active = (1.0 - prior.rho) * zero.active;
    if prior.rho > 0.0 {
        let v = prior.var0;
        let var_w = v + sigma_xi2;
        let nz = l1_branch(theta, var_w, v / var_w, v * sigma_xi2 / var_w);
        q += prior.rho * nz.mse;
        active += prior.rho * nz.active;
    }
    (q, active)
}

/// Closed-form L1 moments `(q_new, χ_new)`.
pub fn l1_moments_closed_form(state: &MeanFieldState, prior: &SignalPrior) -> (f64, f64) {
    let (q, active) = l1_closed_form(state.theta, state.sigma_xi2, prior);
    (q, state.sigma_eff2 * active)
}

/// Quenched `(E[û²], E[χ_local])` by composite quadrature over `w`.
pub fn quenched_moments_quadrature(
    state: &MeanFieldState,
    penalty: &PenaltyModel,
    prior: &SignalPrior,
    opts: &QuadratureOptions,
) -> Result<(f64, f64)> {
    let s = state.sigma_eff2;
    if !(s > 0.0) {
        return domain(format!("effective variance must be > 0, got {s}"));
    }
    let kinks = penalty.prox_breakpoints(s);
    let sx2 = state.sigma_xi2;

    let [q0, c0] = gaussian_expectation(
        sx2.sqrt(),
        &kinks,
        |w| {
            let x = penalty.prox(w, s);
            [x * x, penalty.local_susceptibility(x, s)]
        },
        opts,
    )?;
    let mut q = (1.0 - prior.rho) * q0;
    let mut chi = (1.0 - prior.rho) * c0;

    if prior.rho > 0.0 {
        let v = prior.var0;
        let var_w = v + sx2;
        let k = v / var_w;
        let c = v * sx2 / var_w;
        let [q1, c1] = gaussian_expectation(
            var_w.sqrt(),
            &kinks,
            |w| {
                let x = penalty.prox(w, s);
                let d = x - k * w;
                [d * d + c, penalty.local_susceptibility(x, s)]
            },
            opts,
        )?;
        q += prior.rho * q1;
        chi += prior.rho * c1;
    }
    Ok((q, chi))
}

/// Quenched moments `(q_new, χ_new)` of the decoupled problem at `state`.
///
/// L1 uses the Gaussian closed forms; smooth penalties use quadrature.
pub fn quenched_moments(state: &MeanFieldState, penalty: &PenaltyModel, prior: &SignalPrior) -> Result<(f64, f64)> {
    match penalty {
        PenaltyModel::L1 { .. } => Ok(l1_moments_closed_form(state, prior)),
        _ => quenched_moments_quadrature(state, penalty, prior, &QuadratureOptions::default()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

fn divergence_cap(prior: &SignalPrior, sigma_zeta2: f64) -> f64 {
    1e6 * prior.second_moment().max(sigma_zeta2).max(1.0)
}

/// Damped fixed-point iteration of the finite-σ equations.
pub fn solve_fixed_point(
    params: &EnsembleParams,
    penalty: &PenaltyModel,
    prior: &SignalPrior,
    init: &MeanFieldState,
    opts: &FixedPointOptions,
) -> Result<FixedPointReport> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return domain(format!("damping must lie in (0, 1], got {}", opts.damping));
    }
    if !(params.sigma2 > 0.0) {
        return domain("finite-σ mode needs sigma2 > 0; use the basis-pursuit limit for σ → 0");
    }
    let gamma = opts.damping;
    let cap = divergence_cap(prior, params.sigma_zeta2);
    let mut q = init.q;
    let mut chi = init.chi_bar;
    let mut residual = f64::INFINITY;

    for it in 1..=opts.max_iter {
        let state = MeanFieldState::from_order_parameters(q, chi, params, penalty);
        let (q_new, chi_new) = quenched_moments(&state, penalty, prior)?;
        residual = ((q_new - q).abs() / q.max(RESIDUAL_FLOOR)).max((chi_new - chi).abs() / chi.max(RESIDUAL_FLOOR));
        q = (1.0 - gamma) * q + gamma * q_new;
        chi = (1.0 - gamma) * chi + gamma * chi_new;
        if !q.is_finite() || q > cap {
            return Ok(FixedPointReport {
                state: MeanFieldState::from_order_parameters(q, chi, params, penalty),
                iterations: it,
                residual,
                converged: false,
                diverged: true,
            });
        }
        if residual <= opts.tol {
            return Ok(FixedPointReport {
                state: MeanFieldState::from_order_parameters(q, chi, params, penalty),
                iterations: it,
                residual,
                converged: true,
                diverged: false,
            });
        }
    }
    Ok(FixedPointReport {
        state: MeanFieldState::from_order_parameters(q, chi, params, penalty),
        iterations: opts.max_iter,
        residual,
        converged: false,
        diverged: false,
    })
}

/// Active fraction `P(|x0 + ξ| > θ)` with `ξ ~ N(0, sigma_xi2)`.
pub fn active_fraction(theta: f64, sigma_xi2: f64, prior: &SignalPrior) -> f64 {
    l1_closed_form(theta, sigma_xi2, prior).1
}

fn active_fraction_slope(theta: f64, sigma_xi2: f64, prior: &SignalPrior) -> f64 {
    let mut d = 0.0;
    if sigma_xi2 > 0.0 {
        let s = sigma_xi2.sqrt();
        d -= (1.0 - prior.rho) * 2.0 * normal_pdf(theta / s) / s;
    }
    if prior.rho > 0.0 {
        let s = (prior.var0 + sigma_xi2).sqrt();
        d -= prior.rho * 2.0 * normal_pdf(theta / s) / s;
    }
    d
}

/// Threshold `θ ≥ 0` with active fraction exactly `alpha`.
///
/// Safeguarded Newton inside a bisection bracket; `guess` seeds the search.
pub fn threshold_for_active_fraction(alpha: f64, sigma_xi2: f64, prior: &SignalPrior, guess: Option<f64>) -> Result<f64> {
    let at_zero = if sigma_xi2 > 0.0 { 1.0 } else { prior.rho };
    if alpha >= at_zero {
        return Ok(0.0);
    }
    let g = |t: f64| active_fraction(t, sigma_xi2, prior) - alpha;
    let scale = (prior.var0 * (prior.rho > 0.0) as u8 as f64 + sigma_xi2).sqrt();
    let mut lo = 0.0;
    let mut hi = scale.max(f64::MIN_POSITIVE);
    let mut expand = 0;
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        expand += 1;
        if expand > 200 || !hi.is_finite() {
            return Err(Error::Numerical(format!(
                "threshold bracket failed: alpha={alpha}, sigma_xi2={sigma_xi2:e}, rho={}",
                prior.rho
            )));
        }
    }
    let mut t = guess.filter(|t| *t > lo && *t < hi).unwrap_or(0.5 * (lo + hi));
    for _ in 0..200 {
        let v = g(t);
        if v == 0.0 {
            return Ok(t);
        }
        if v > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let d = active_fraction_slope(t, sigma_xi2, prior);
        let newton = if d < 0.0 { t - v / d } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - t).abs() <= 1e-15 * t.max(1e-300) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        t = next;
    }
    if g(t).abs() < 1e-12 {
        Ok(t)
    } else {
        Err(Error::Numerical(format!(
            "threshold root-find did not converge: alpha={alpha}, sigma_xi2={sigma_xi2:e}, bracket=[{lo:e}, {hi:e}]"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisPursuitOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Starting `q`; defaults to the prior second moment.
    pub init_q: Option<f64>,
}

impl Default for BasisPursuitOptions {
    fn default() -> Self {
        Self {
            damping: 1.0,
            tol: 1e-10,
            max_iter: 1_000_000,
            init_q: None,
        }
    }
}

/// State of the basis-pursuit limit at `(q, θ)`. The ℓ1 weight is 1, so
/// `σ_eff² = θ` and `χ̄ = α·θ`.
fn bp_state(q: f64, theta: f64, sigma_xi2: f64, alpha: f64) -> MeanFieldState {
    MeanFieldState {
        q,
        chi_bar: alpha * theta,
        sigma_eff2: theta,
        sigma_xi2,
        theta,
    }
}

/// σ → 0 limit of the ℓ1 equations (basis pursuit).
///
/// At `σ = 0` the susceptibility condition becomes `P(|x0 + ξ| > θ) = α`,
/// which fixes `θ` for a given `q`; `q` then solves
/// `q = E[(η(x0 + ξ; θ) − x0)²]` with `σ_ξ² = q/α + σ_ζ²`.
pub fn solve_basis_pursuit_limit(alpha: f64, prior: &SignalPrior, sigma_zeta2: f64, tol: f64) -> Result<FixedPointReport> {
    solve_basis_pursuit_limit_with(
        alpha,
        prior,
        sigma_zeta2,
        &BasisPursuitOptions {
            tol,
            ..Default::default()
        },
    )
}

pub fn solve_basis_pursuit_limit_with(
    alpha: f64,
    prior: &SignalPrior,
    sigma_zeta2: f64,
    opts: &BasisPursuitOptions,
) -> Result<FixedPointReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return domain(format!("basis-pursuit limit needs alpha in (0, 1], got {alpha}"));
    }
    if !(prior.rho > 0.0 && prior.rho < 1.0) {
        return domain(format!("basis-pursuit limit needs rho in (0, 1), got {}", prior.rho));
    }
    if !(sigma_zeta2 >= 0.0) {
        return domain(format!("noise variance must be >= 0, got {sigma_zeta2}"));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return domain(format!("damping must lie in (0, 1], got {}", opts.damping));
    }
    let noiseless = sigma_zeta2 == 0.0;
    let recovered = |iterations: usize| FixedPointReport {
        state: bp_state(0.0, 0.0, 0.0, alpha),
        iterations,
        residual: 0.0,
        converged: true,
        diverged: false,
    };
    // A square noiseless system is solved exactly.
    if noiseless && alpha >= 1.0 {
        return Ok(recovered(0));
    }

    let q_floor = recovery_threshold(prior);
    let cap = divergence_cap(prior, sigma_zeta2);
    let gamma = opts.damping;
    let mut q = opts.init_q.unwrap_or_else(|| prior.second_moment()).max(0.0);
    let mut theta_guess = None;
    let mut residual = f64::INFINITY;
    let mut last = bp_state(q, 0.0, q / alpha + sigma_zeta2, alpha);

    for it in 1..=opts.max_iter {
        let sx2 = q / alpha + sigma_zeta2;
        if sx2 == 0.0 {
            return Ok(recovered(it));
        }
        let theta = threshold_for_active_fraction(alpha, sx2, prior, theta_guess)?;
        theta_guess = Some(theta);
        let (q_new, _) = l1_closed_form(theta, sx2, prior);
        residual = (q_new - q).abs() / q.max(RESIDUAL_FLOOR);
        last = bp_state(q, theta, sx2, alpha);
        q = (1.0 - gamma) * q + gamma * q_new;

        if !q.is_finite() || q > cap {
            return Ok(FixedPointReport {
                state: last,
                iterations: it,
                residual,
                converged: false,
                diverged: true,
            });
        }
        if noiseless && q < q_floor {
            return Ok(recovered(it));
        }
        if residual <= opts.tol {
            let sx2 = q / alpha + sigma_zeta2;
            let theta = threshold_for_active_fraction(alpha, sx2, prior, theta_guess)?;
            return Ok(FixedPointReport {
                state: bp_state(q, theta, sx2, alpha),
                iterations: it,
                residual,
                converged: true,
                diverged: false,
            });
        }
    }
    Ok(FixedPointReport {
        state: last,
        iterations: opts.max_iter,
        residual,
        converged: false,
        diverged: false,
    })
}

/// Classifies a basis-pursuit fixed point.
pub fn phase_point(alpha: f64, prior: &SignalPrior, report: &FixedPointReport) -> PhasePoint {
    PhasePoint {
        alpha,
        rho: prior.rho,
        q: report.state.q,
        chi_bar: report.state.chi_bar,
        recovered: report.state.q <= recovery_threshold(prior),
    }
}

/// Limit of `q_new/q` as `q → 0` in the noiseless basis-pursuit map.
///
/// As `q → 0` every nonzero coordinate is active, the threshold in units of
/// `σ_ξ` solves `ρ + (1−ρ)·2Q(τ) = α`, and the map becomes linear in `q`.
/// The error-free fixed point is unstable exactly when the gain exceeds 1.
pub fn small_q_gain(alpha: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return domain(format!("rho must lie in (0, 1), got {rho}"));
    }
    if alpha <= rho {
        return Ok(f64::INFINITY);
    }
    if alpha >= 1.0 {
        return Ok(1.0);
    }
    let target = (alpha - rho) / (2.0 * (1.0 - rho));
    // Invert the decreasing tail Q(τ) = target by bisection.
    let (mut lo, mut hi) = (0.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_tail(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let t2 = 1.0 + tau * tau;
    let zero_branch = 2.0 * (t2 * normal_tail(tau) - tau * normal_pdf(tau));
    Ok((rho * t2 + (1.0 - rho) * zero_branch) / alpha)
}

/// Linear-stability transition: the `α` in `(ρ, 1)` where [`small_q_gain`]
/// crosses 1.
pub fn critical_alpha_linear(rho: f64, tol_alpha: f64) -> Result<f64> {
    let (mut lo, mut hi) = (rho, 1.0);
    while hi - lo > tol_alpha.max(1e-15) {
        let mid = 0.5 * (lo + hi);
        if small_q_gain(mid, rho)? > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One row of a boundary scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub rho: f64,
    /// Largest `α` with an error-phase (`q > 0`) fixed point.
    pub alpha_c: Option<f64>,
    /// Transition from the linear stability of `q = 0`.
    pub alpha_c_linear: Option<f64>,
    pub tol_alpha: f64,
    pub error: Option<String>,
}

fn error_branch(alpha: f64, prior: &SignalPrior, warm_q: Option<f64>) -> Result<(bool, f64)> {
    let opts = BasisPursuitOptions {
        init_q: warm_q,
        ..Default::default()
    };
    let rep = solve_basis_pursuit_limit_with(alpha, prior, 0.0, &opts)?;
    if rep.diverged {
        return Err(Error::Numerical(format!("basis-pursuit iteration diverged at alpha={alpha}")));
    }
    Ok((!phase_point(alpha, prior, &rep).recovered, rep.state.q))
}

fn boundary_for(rho: f64, bracket: (f64, f64), tol_alpha: f64, prior_var: f64) -> Result<f64> {
    let prior = SignalPrior::new(rho, prior_var)?;
    let (mut lo, mut hi) = bracket;
    lo = lo.clamp(1e-6, 1.0);
    hi = hi.clamp(lo, 1.0);

    let mut warm = None;
    let mut widen = 0;
    loop {
        let (err, q) = error_branch(lo, &prior, warm)?;
        if err {
            warm = Some(q);
            break;
        }
        widen += 1;
        if widen > 40 || lo <= 1e-6 {
            return Err(Error::Numerical(format!("no error-phase point at or below alpha={lo} for rho={rho}")));
        }
        lo *= 0.5;
    }
    widen = 0;
    loop {
        let (err, q) = error_branch(hi, &prior, warm)?;
        if !err {
            break;
        }
        warm = Some(q);
        lo = hi;
        widen += 1;
        if widen > 40 || hi >= 1.0 {
            return Err(Error::Numerical(format!("no recovery-phase point at or above alpha={hi} for rho={rho}")));
        }
        hi = 0.5 * (hi + 1.0);
    }
    while hi - lo > tol_alpha {
        let mid = 0.5 * (lo + hi);
        let (err, q) = error_branch(mid, &prior, warm)?;
        if err {
            lo = mid;
            warm = Some(q);
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sparse-recovery boundary `α_c(ρ)` by bisection on the existence of the
/// `q > 0` basis-pursuit fixed point, warm-started along each chain.
///
/// Points are independent and computed in parallel.
pub fn scan_phase_boundary(rho_grid: &[f64], alpha_bracket: (f64, f64), tol_alpha: f64, prior_var: f64) -> Vec<BoundaryPoint> {
    rho_grid
        .par_iter()
        .map(|&rho| {
            let res = if tol_alpha > 0.0 {
                boundary_for(rho, alpha_bracket, tol_alpha, prior_var)
            } else {
                domain(format!("tol_alpha must be > 0, got {tol_alpha}"))
            };
            let linear = critical_alpha_linear(rho, tol_alpha.max(1e-12)).ok();
            match res {
                Ok(a) => BoundaryPoint {
                    rho,
                    alpha_c: Some(a),
                    alpha_c_linear: linear,
                    tol_alpha,
                    error: None,
                },
                Err(e) => BoundaryPoint {
                    rho,
                    alpha_c: None,
                    alpha_c_linear: linear,
                    tol_alpha,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}
