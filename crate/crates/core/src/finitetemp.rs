//! Finite-temperature single-site averages and the `βΔQ → χ̄` check.
//!
//! At inverse temperature `β` a decoupled coordinate is distributed as
//! `P(x) ∝ exp{−β[(x − t)²/(2σ_eff²) + U(x)]}` with `t = x0 + ξ + σ_eff²f`.
//! The self-consistent pair `(q, ΔQ)` replaces `(q, χ̄)`, with
//! `σ_eff² = σ²(1 + βΔQ/(ασ²))`. As `β → ∞`, `βΔQ` should approach the
//! zero-temperature `χ̄`.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::meanfield::{solve_fixed_point, FixedPointOptions, MeanFieldState};
use crate::model::{EnsembleParams, PenaltyModel, ScalarEnv, SignalPrior};
use crate::quad::{gaussian_expectation, integrate, QuadratureOptions, GAUSSIAN_SPAN};

/// Largest supported inverse temperature.
pub const BETA_MAX: f64 = 1e6;

fn inner_opts() -> QuadratureOptions {
    QuadratureOptions {
        rel_tol: 1e-11,
        abs_tol: 1e-14,
        ..QuadratureOptions::default()
    }
}

fn outer_opts() -> QuadratureOptions {
    QuadratureOptions {
        rel_tol: 1e-10,
        ..QuadratureOptions::default()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= BETA_MAX) {
        return domain(format!("beta must lie in (0, {BETA_MAX:e}], got {beta}"));
    }
    Ok(())
}

/// `U(x + d) − U(x)`.
fn penalty_increment(penalty: &PenaltyModel, x: f64, d: f64) -> f64 {
    match *penalty {
        PenaltyModel::L1 { lambda } => lambda * ((x + d).abs() - x.abs()),
        PenaltyModel::SmoothedL1 { lambda, epsilon } => {
            let e2 = epsilon * epsilon;
            let a = ((x + d) * (x + d) + e2).sqrt();
            let b = (x * x + e2).sqrt();
            lambda * d * (2.0 * x + d) / (a + b)
        }
        PenaltyModel::Ridge { lambda } => 0.5 * lambda * d * (2.0 * x + d),
    }
}

/// Thermal `(⟨x⟩, ⟨δx²⟩)` for the site cost `(x − t)²/(2s) + U(x)`.
///
/// Integrates `exp(−β[φ(x) − φ(x*)])` around the zero-temperature minimizer
/// `x*`; strong convexity bounds the tails beyond `12·√(s/β)`.
pub fn thermal_site_moments(beta: f64, t: f64, s: f64, penalty: &PenaltyModel) -> Result<(f64, f64)> {
    check_beta(beta)?;
    if !(s > 0.0 && s.is_finite()) {
        return domain(format!("effective variance must be positive, got {s}"));
    }
    let x_star = penalty.prox(t, s);
    let r = x_star - t;
    // φ(x* + d) − φ(x*), written without cancellation.
    let excess = |d: f64| d * (2.0 * r + d) / (2.0 * s) + penalty_increment(penalty, x_star, d);
    let sd = (s / beta).sqrt();

    // Work in z = (x − x*)/sd so every moment is O(1).
    let mut kinks = Vec::new();
    match *penalty {
        PenaltyModel::L1 { lambda } => {
            kinks.push(0.0);
            for k in [1.0, 5.0, 20.0] {
                let d = k / (beta * lambda);
                kinks.extend([-d, d]);
            }
        }
        PenaltyModel::SmoothedL1 { epsilon, .. } => kinks.extend([-epsilon, 0.0, epsilon]),
        PenaltyModel::Ridge { .. } => {}
    }
    let mut breaks = vec![-6.0, -3.0, -1.0, 1.0, 3.0, 6.0];
    breaks.extend(kinks.iter().map(|x| (x - x_star) / sd));

    let f = |z: f64| {
        let p = (-beta * excess(sd * z)).exp();
        [p, z * p, z * z * p]
    };
    let [norm, m1, m2] = integrate(&f, -GAUSSIAN_SPAN, GAUSSIAN_SPAN, &breaks, &inner_opts())?;
    if !(norm > 0.0 && norm.is_finite() && m1.is_finite() && m2.is_finite()) {
        return Err(Error::Numerical(format!("thermal partition integral is {norm} at beta {beta}")));
    }
    let mean = m1 / norm;
    let var = (m2 / norm - mean * mean).max(0.0);
    Ok((x_star + sd * mean, sd * sd * var))
}

/// Thermal `(⟨u⟩, ⟨δu²⟩)` with `u = x − x0` for one site.
pub fn thermal_moments(beta: f64, env: &ScalarEnv, penalty: &PenaltyModel) -> Result<(f64, f64)> {
    let (mean_x, var) = thermal_site_moments(beta, env.prox_input(), env.sigma_eff2, penalty)?;
    Ok((mean_x - env.x0, var))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub beta: f64,
    /// `E[⟨u⟩²]`
    pub q: f64,
    /// `E[⟨δu²⟩]`
    pub delta_q: f64,
    pub sigma_eff2: f64,
    pub sigma_xi2: f64,
}

impl ThermalState {
    pub fn new(beta: f64, q: f64, delta_q: f64, params: &EnsembleParams) -> Self {
        Self {
            beta,
            q,
            delta_q,
            sigma_eff2: params.sigma2 * (1.0 + beta * delta_q / (params.alpha * params.sigma2)),
            sigma_xi2: q / params.alpha + params.sigma_zeta2,
        }
    }

    pub fn beta_delta_q(&self) -> f64 {
        self.beta * self.delta_q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalReport {
    pub state: ThermalState,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub diverged: bool,
}

/// Quenched `(E[⟨u⟩²], E[⟨δu²⟩])` at `state`.
pub fn thermal_quenched_moments(state: &ThermalState, penalty: &PenaltyModel, prior: &SignalPrior) -> Result<(f64, f64)> {
    let s = state.sigma_eff2;
    let kinks = penalty.prox_breakpoints(s);
    let opts = outer_opts();
    let site = |w: f64| thermal_site_moments(state.beta, w, s, penalty);
    let err = RefCell::new(None);

    let [q0, v0] = gaussian_expectation(
        state.sigma_xi2.sqrt(),
        &kinks,
        |w| match site(w) {
            Ok((m, v)) => [m * m, v],
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                [f64::NAN; 2]
            }
        },
        &opts,
    )?;
    if let Some(e) = err.borrow_mut().take() {
        return Err(e);
    }
    let mut q = (1.0 - prior.rho) * q0;
    let mut dq = (1.0 - prior.rho) * v0;

    if prior.rho > 0.0 {
        let v = prior.var0;
        let var_w = v + state.sigma_xi2;
        let k = v / var_w;
        let c = v * state.sigma_xi2 / var_w;
        let [q1, v1] = gaussian_expectation(
            var_w.sqrt(),
            &kinks,
            |w| match site(w) {
                Ok((m, var)) => {
                    let d = m - k * w;
                    [d * d + c, var]
                }
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    [f64::NAN; 2]
                }
            },
            &opts,
        )?;
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        q += prior.rho * q1;
        dq += prior.rho * v1;
    }
    Ok((q, dq))
}

/// Damped iteration of `(q, ΔQ)` from `init`.
pub fn solve_thermal_fixed_point_with(
    params: &EnsembleParams,
    penalty: &PenaltyModel,
    prior: &SignalPrior,
    init: &ThermalState,
    opts: &FixedPointOptions,
) -> Result<ThermalReport> {
    check_beta(init.beta)?;
    if !(params.sigma2 > 0.0) {
        return domain("finite-temperature mode needs sigma2 > 0");
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return domain(format!("damping must lie in (0, 1], got {}", opts.damping));
    }
    let beta = init.beta;
    let floor = 1e-300;
    let cap = 1e6 * prior.second_moment().max(params.sigma_zeta2).max(1.0);
    let (mut q, mut dq) = (init.q, init.delta_q);
    let mut residual = f64::INFINITY;
    let report = |q, dq, it, residual, converged, diverged| ThermalReport {
        state: ThermalState::new(beta, q, dq, params),
        iterations: it,
        residual,
        converged,
        diverged,
    };
    for it in 1..=opts.max_iter {
        let state = ThermalState::new(beta, q, dq, params);
        let (q_new, dq_new) = thermal_quenched_moments(&state, penalty, prior)?;
        residual = ((q_new - q).abs() / q.max(floor)).max((dq_new - dq).abs() / dq.max(floor));
        q = (1.0 - opts.damping) * q + opts.damping * q_new;
        dq = (1.0 - opts.damping) * dq + opts.damping * dq_new;
        if !(q.is_finite() && dq.is_finite()) || q > cap {
            return Ok(report(q, dq, it, residual, false, true));
        }
        if residual <= opts.tol {
            return Ok(report(q, dq, it, residual, true, false));
        }
    }
    Ok(report(q, dq, opts.max_iter, residual, false, false))
}

/// Solves at `beta`, starting from the zero-temperature fixed point.
pub fn solve_thermal_fixed_point(
    params: &EnsembleParams,
    penalty: &PenaltyModel,
    prior: &SignalPrior,
    beta: f64,
    tol: f64,
) -> Result<ThermalReport> {
    check_beta(beta)?;
    let zero_t = zero_temperature(params, penalty, prior, tol)?;
    let init = ThermalState::new(beta, zero_t.q, zero_t.chi_bar / beta, params);
    let opts = FixedPointOptions {
        tol,
        max_iter: 10_000,
        ..FixedPointOptions::default()
    };
    solve_thermal_fixed_point_with(params, penalty, prior, &init, &opts)
}

fn zero_temperature(
    params: &EnsembleParams,
    penalty: &PenaltyModel,
    prior: &SignalPrior,
    tol: f64,
) -> Result<MeanFieldState> {
    let init = MeanFieldState::initial(params, penalty, prior);
    let opts = FixedPointOptions {
        tol: tol.min(1e-10),
        ..FixedPointOptions::default()
    };
    let rep = solve_fixed_point(params, penalty, prior, &init, &opts)?;
    if !rep.converged {
        return Err(Error::Numerical(format!(
            "zero-temperature reference did not converge (residual {:e})",
            rep.residual
        )));
    }
    Ok(rep.state)
}

/// One row of the fluctuation-dissipation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdtRow {
    pub beta: f64,
    pub q: f64,
    pub delta_q: f64,
    pub beta_delta_q: f64,
    pub chi_bar_ref: f64,
    pub rel_err: f64,
    pub converged: bool,
}

/// Tabulates `βΔQ` against the zero-temperature `χ̄` along `beta_grid`.
///
/// Each β is warm-started from the previous one.
pub fn fdt_check(
    params: &EnsembleParams,
    penalty: &PenaltyModel,
    prior: &SignalPrior,
    beta_grid: &[f64],
) -> Result<Vec<FdtRow>> {
    if beta_grid.is_empty() {
        return domain("beta grid is empty");
    }
    if beta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return domain("beta grid must be strictly increasing");
    }
    for &b in beta_grid {
        check_beta(b)?;
    }
    let tol = 1e-10;
    let zero_t = zero_temperature(params, penalty, prior, tol)?;
    let chi_ref = zero_t.chi_bar;
    let opts = FixedPointOptions {
        tol,
        max_iter: 10_000,
        ..FixedPointOptions::default()
    };
    let (mut q, mut chi) = (zero_t.q, chi_ref);
    let mut rows = Vec::with_capacity(beta_grid.len());
    for &beta in beta_grid {
        let init = ThermalState::new(beta, q, chi / beta, params);
        let rep = solve_thermal_fixed_point_with(params, penalty, prior, &init, &opts)?;
        if rep.diverged {
            return Err(Error::Numerical(format!("thermal iteration diverged at beta {beta}")));
        }
        let st = rep.state;
        q = st.q;
        chi = st.beta_delta_q();
        rows.push(FdtRow {
            beta,
            q: st.q,
            delta_q: st.delta_q,
            beta_delta_q: chi,
            chi_bar_ref: chi_ref,
            rel_err: (chi - chi_ref).abs() / chi_ref,
            converged: rep.converged,
        });
    }
    Ok(rows)
}
