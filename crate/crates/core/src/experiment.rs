//! Finite-size perturbed basis-pursuit experiments.
//!
//! For a noiseless instance, each sampled node `a` gets its own chain of LPs
//! `min ‖x‖₁ − f·x_a` over the field grid, warm-started from the neighbouring
//! grid point. The per-node responses `u_a(f) = x̂_a(f) − x0_a` are staircases;
//! their average `Δu(f)` is fitted by a line through the origin near `f = 0`
//! to estimate the average local susceptibility.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::lp::{solve_bp, solve_bp_warm, BasisPursuitLp, LpStatus};
use crate::meanfield::solve_basis_pursuit_limit;
use crate::model::{derive_seed, draw_instance_with, ProblemInstance, SignalPrior, Support};

/// Largest `|f|` in the default grid.
pub const DEFAULT_F_MAX: f64 = 0.5;
pub const DEFAULT_F_MIN: f64 = 1e-4;
/// Magnitudes per side in the default grid.
pub const DEFAULT_F_PER_SIDE: usize = 10;
pub const DEFAULT_FIT_WINDOW: f64 = 0.1;
pub const DEFAULT_NODE_SAMPLE: usize = 50;
/// Minimum grid points on each side of 0 inside the fit window.
pub const MIN_FIT_POINTS_PER_SIDE: usize = 3;
/// Consecutive staircase values closer than this (relative) are one step.
pub const STEP_TOL: f64 = 1e-9;

/// Symmetric grid: 0 plus `per_side` log-spaced magnitudes in
/// `[f_min, f_max]` on each side, ascending.
pub fn symmetric_log_grid(f_min: f64, f_max: f64, per_side: usize) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_max >= f_min && f_max < 1.0) {
        return domain(format!("field grid needs 0 < f_min <= f_max < 1, got [{f_min}, {f_max}]"));
    }
    if per_side == 0 {
        return Ok(vec![0.0]);
    }
    let mags: Vec<f64> = if per_side == 1 {
        vec![f_min]
    } else {
        let step = (f_max / f_min).ln() / (per_side - 1) as f64;
        let mut m: Vec<f64> = (0..per_side).map(|i| f_min * (step * i as f64).exp()).collect();
        m[per_side - 1] = f_max;
        m
    };
    let mut grid: Vec<f64> = mags.iter().rev().map(|m| -m).collect();
    grid.push(0.0);
    grid.extend(mags);
    Ok(grid)
}

/// The 21-point default grid.
pub fn default_f_grid() -> Vec<f64> {
    symmetric_log_grid(DEFAULT_F_MIN, DEFAULT_F_MAX, DEFAULT_F_PER_SIDE).expect("default grid is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSample {
    All,
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub f_grid: Vec<f64>,
    pub node_ids: Vec<usize>,
    /// `staircases[k][g]` is `u_a(f_g)` for node `node_ids[k]`; `None` marks a
    /// failed LP.
    pub staircases: Vec<Vec<Option<f64>>>,
    /// `Δu(f)`, averaged over nodes with both `u_a(f)` and `u_a(0)`.
    pub avg_response: Vec<f64>,
    pub fitted_chi: Option<f64>,
    pub fit_window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub lp_solves: usize,
    pub simplex_iterations: usize,
    /// Not serialized, so reports stay reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub node: usize,
    pub f: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub instance_meta: InstanceMeta,
    /// `‖x̂(f = 0) − x0‖²/N`.
    pub mse_empirical: f64,
    pub response: ResponseCurve,
    pub runtime_stats: RuntimeStats,
    pub partial: bool,
    pub failures: Vec<CellFailure>,
}

/// Least-squares slope through the origin of `response` over
/// `0 < |f| ≤ window`, or `None` with fewer than
/// [`MIN_FIT_POINTS_PER_SIDE`] points per side.
pub fn fit_slope(f_grid: &[f64], response: &[f64], window: f64) -> Option<f64> {
    let inside = |f: f64| f != 0.0 && f.abs() <= window;
    let neg = f_grid.iter().filter(|f| inside(**f) && **f < 0.0).count();
    let pos = f_grid.iter().filter(|f| inside(**f) && **f > 0.0).count();
    if neg < MIN_FIT_POINTS_PER_SIDE || pos < MIN_FIT_POINTS_PER_SIDE {
        return None;
    }
    let (mut sfy, mut sff) = (0.0, 0.0);
    for (f, r) in f_grid.iter().zip(response) {
        if inside(*f) {
            sfy += f * r;
            sff += f * f;
        }
    }
    Some(sfy / sff)
}

struct NodeChain {
    values: Vec<Option<f64>>,
    solves: usize,
    iterations: usize,
    failures: Vec<CellFailure>,
}

/// Perturbed basis-pursuit responses for the sampled nodes of one instance.
pub fn run_response_experiment(
    instance: &ProblemInstance,
    f_grid: &[f64],
    node_sample: NodeSample,
    seed: u64,
) -> Result<ExperimentReport> {
    run_response_experiment_with(instance, f_grid, node_sample, seed, DEFAULT_FIT_WINDOW)
}

pub fn run_response_experiment_with(
    instance: &ProblemInstance,
    f_grid: &[f64],
    node_sample: NodeSample,
    seed: u64,
    fit_window: f64,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    if instance.noise_var != 0.0 {
        return domain("the response experiment needs a noiseless instance");
    }
    if f_grid.iter().any(|f| !(f.abs() < 1.0)) {
        return domain("field grid values must satisfy |f| < 1");
    }
    let mut grid = f_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let Some(zero) = grid.iter().position(|f| *f == 0.0) else {
        return domain("field grid must contain 0");
    };

    let h = instance.h_matrix();
    let base_lp = BasisPursuitLp::new(&h, &instance.y);
    let feas_tol = base_lp.default_feas_tol();
    let base = solve_bp(&base_lp, feas_tol)?;
    if base.status != LpStatus::Optimal {
        return Err(Error::Numerical(format!("unperturbed basis pursuit ended with status {:?}", base.status)));
    }

    let node_ids: Vec<usize> = match node_sample {
        NodeSample::All => (0..instance.n).collect(),
        NodeSample::Count(k) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut ids = index::sample(&mut rng, instance.n, k.min(instance.n)).into_vec();
            ids.sort_unstable();
            ids
        }
    };

    let chains: Vec<NodeChain> = node_ids
        .par_iter()
        .map(|&a| {
            let mut chain = NodeChain {
                values: vec![None; grid.len()],
                solves: 0,
                iterations: 0,
                failures: Vec::new(),
            };
            let mut walk = |order: &mut dyn Iterator<Item = usize>, mut basis: Vec<usize>, mut prev: Option<f64>| {
                let mut first = None;
                for g in order {
                    let lp = BasisPursuitLp::perturbed(&h, &instance.y, a, grid[g]);
                    chain.solves += 1;
                    match solve_bp_warm(&lp, &basis, feas_tol) {
                        Ok(sol) if sol.status == LpStatus::Optimal => {
                            chain.iterations += sol.iterations;
                            let mut u = sol.x_hat[a] - instance.x0[a];
                            // Degenerate pivots move the basis but not the vertex.
                            if let Some(p) = prev {
                                if (u - p).abs() <= STEP_TOL * (1.0 + p.abs()) {
                                    u = p;
                                }
                            }
                            chain.values[g] = Some(u);
                            first.get_or_insert(u);
                            prev = Some(u);
                            basis = sol.basis;
                        }
                        Ok(sol) => chain.failures.push(CellFailure {
                            node: a,
                            f: grid[g],
                            reason: format!("{:?}", sol.status),
                        }),
                        Err(e) => chain.failures.push(CellFailure {
                            node: a,
                            f: grid[g],
                            reason: e.to_string(),
                        }),
                    }
                }
                (basis, first)
            };
            let (at_zero, u0) = walk(&mut (zero..grid.len()), base.basis.clone(), None);
            walk(&mut (0..zero).rev(), at_zero, u0);
            chain
        })
        .collect();

    let mut avg_response = vec![0.0; grid.len()];
    for (g, avg) in avg_response.iter_mut().enumerate() {
        if g == zero {
            continue;
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for c in &chains {
            if let (Some(u), Some(u0)) = (c.values[g], c.values[zero]) {
                sum += u - u0;
                count += 1;
            }
        }
        *avg = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    let fitted_chi = fit_slope(&grid, &avg_response, fit_window);

    let mut stats = RuntimeStats {
        lp_solves: 1,
        simplex_iterations: base.iterations,
        wall_time_s: 0.0,
    };
    let mut failures = Vec::new();
    let mut staircases = Vec::with_capacity(chains.len());
    for c in chains {
        stats.lp_solves += c.solves;
        stats.simplex_iterations += c.iterations;
        failures.extend(c.failures);
        staircases.push(c.values);
    }
    stats.wall_time_s = start.elapsed().as_secs_f64();

    Ok(ExperimentReport {
        instance_meta: InstanceMeta {
            seed: instance.seed,
            n: instance.n,
            m: instance.m,
            k: instance.support_size(),
        },
        mse_empirical: instance.mse(&base.x_hat),
        response: ResponseCurve {
            f_grid: grid,
            node_ids,
            staircases,
            avg_response,
            fitted_chi,
            fit_window: (-fit_window, fit_window),
        },
        runtime_stats: stats,
        partial: !failures.is_empty(),
        failures,
    })
}

/// Mean and standard error of the per-instance fitted susceptibility.
pub fn estimate_empirical_chi(reports: &[ExperimentReport]) -> Result<(f64, f64)> {
    let chis: Vec<f64> = reports.iter().filter_map(|r| r.response.fitted_chi).collect();
    mean_stderr(&chis)
}

pub(crate) fn mean_stderr(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Average response over instances and nodes sharing one grid, with its fit.
pub fn pooled_response(reports: &[ExperimentReport]) -> Result<(Vec<f64>, Vec<f64>, Option<f64>)> {
    let Some(first) = reports.first() else {
        return Err(Error::InsufficientData("no reports to pool".into()));
    };
    let grid = first.response.f_grid.clone();
    if reports.iter().any(|r| r.response.f_grid != grid) {
        return domain("pooled response needs a common field grid");
    }
    let mut avg = vec![0.0; grid.len()];
    for r in reports {
        for (a, v) in avg.iter_mut().zip(&r.response.avg_response) {
            *a += v / reports.len() as f64;
        }
    }
    let fit = fit_slope(&grid, &avg, first.response.fit_window.1);
    Ok((grid, avg, fit))
}

/// Experiment settings shared by all instances of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub instances: usize,
    pub node_sample: NodeSample,
    pub f_grid: Vec<f64>,
    pub fit_window: f64,
    pub seed: u64,
}

impl BatchConfig {
    pub fn m(&self) -> usize {
        ((self.alpha * self.n as f64).round() as usize).clamp(1, self.n)
    }
}

/// Seed of instance `i` in a batch.
pub fn instance_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, 0, i as u64)
}

/// Seed of the node sample for instance `i`.
pub fn node_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, 1, i as u64)
}

/// Runs the response experiment on `instances` i.i.d. noiseless draws with
/// exactly `k` nonzeros. Instances that cannot be solved at all are returned
/// as errors in place.
pub fn run_batch(cfg: &BatchConfig) -> Result<Vec<Result<ExperimentReport>>> {
    if cfg.k > cfg.n || cfg.n == 0 {
        return domain(format!("need 0 < N and K <= N, got N={}, K={}", cfg.n, cfg.k));
    }
    let prior = SignalPrior::standard(cfg.k as f64 / cfg.n as f64)?;
    let m = cfg.m();
    Ok((0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let inst = draw_instance_with(cfg.n, m, &prior, Support::Exact(cfg.k), 0.0, instance_seed(cfg.seed, i))?;
            run_response_experiment_with(&inst, &cfg.f_grid, cfg.node_sample, node_seed(cfg.seed, i), cfg.fit_window)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub mse_median: f64,
    pub mse_iqr: f64,
    pub q_meanfield: Option<f64>,
    pub n_fail: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical basis-pursuit MSE against the mean-field prediction along
/// `alpha_grid`, with `K = round(ρN)` nonzeros and `M = round(αN)`.
pub fn mse_sweep(alpha_grid: &[f64], rho: f64, n: usize, instances_per_point: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if n == 0 || instances_per_point == 0 {
        return domain("need N > 0 and at least one instance per point");
    }
    let k = (rho * n as f64).round() as usize;
    let prior = SignalPrior::standard(rho)?;
    alpha_grid
        .iter()
        .enumerate()
        .map(|(ai, &alpha)| {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return domain(format!("sampling ratio must lie in (0, 1], got {alpha}"));
            }
            let m = ((alpha * n as f64).round() as usize).clamp(1, n);
            let mses: Vec<Option<f64>> = (0..instances_per_point)
                .into_par_iter()
                .map(|i| {
                    let s = derive_seed(seed, 2 + ai as u64, i as u64);
                    let inst = draw_instance_with(n, m, &prior, Support::Exact(k), 0.0, s).ok()?;
                    let h = inst.h_matrix();
                    let lp = BasisPursuitLp::new(&h, &inst.y);
                    let sol = solve_bp(&lp, lp.default_feas_tol()).ok()?;
                    (sol.status == LpStatus::Optimal).then(|| inst.mse(&sol.x_hat))
                })
                .collect();
            let mut ok: Vec<f64> = mses.iter().flatten().copied().collect();
            let n_fail = mses.len() - ok.len();
            ok.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (median, iqr) = if ok.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (quantile(&ok, 0.5), quantile(&ok, 0.75) - quantile(&ok, 0.25))
            };
            let eff_prior = SignalPrior::standard(k as f64 / n as f64)?;
            let q_meanfield = solve_basis_pursuit_limit(m as f64 / n as f64, &eff_prior, 0.0, 1e-10)
                .ok()
                .filter(|r| r.converged)
                .map(|r| r.state.q);
            Ok(SweepRow {
                alpha,
                mse_median: median,
                mse_iqr: iqr,
                q_meanfield,
                n_fail,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::draw_instance_with;

    fn small_instance(n: usize, m: usize, k: usize, seed: u64) -> ProblemInstance {
        let prior = SignalPrior::standard(k as f64 / n as f64).unwrap();
        draw_instance_with(n, m, &prior, Support::Exact(k), 0.0, seed).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = default_f_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[10], 0.0);
        assert!((g[20] - 0.5).abs() < 1e-15 && (g[11] - 1e-4).abs() < 1e-18);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        for i in 0..10 {
            assert_eq!(g[i], -g[20 - i]);
        }
        let inside = g.iter().filter(|f| **f > 0.0 && **f <= DEFAULT_FIT_WINDOW).count();
        assert!(inside >= MIN_FIT_POINTS_PER_SIDE);
    }

    #[test]
    fn zero_only_grid_has_no_fit() {
        let inst = small_instance(40, 20, 4, 1);
        let rep = run_response_experiment(&inst, &[0.0], NodeSample::Count(5), 2).unwrap();
        assert_eq!(rep.response.avg_response, vec![0.0]);
        assert_eq!(rep.response.fitted_chi, None);
    }

    #[test]
    fn grid_without_zero_rejected() {
        let inst = small_instance(20, 10, 2, 1);
        assert!(run_response_experiment(&inst, &[0.1, 0.2], NodeSample::All, 0).is_err());
    }

    #[test]
    fn noisy_instance_rejected() {
        let prior = SignalPrior::standard(0.1).unwrap();
        let inst = draw_instance_with(20, 10, &prior, Support::Exact(2), 0.01, 1).unwrap();
        assert!(run_response_experiment(&inst, &[0.0], NodeSample::All, 0).is_err());
    }

    #[test]
    fn staircases_are_monotone_and_anchored() {
        let inst = small_instance(60, 25, 8, 4);
        let rep = run_response_experiment(&inst, &default_f_grid(), NodeSample::Count(12), 9).unwrap();
        assert!(!rep.partial);
        let zero = rep.response.f_grid.iter().position(|f| *f == 0.0).unwrap();
        assert_eq!(rep.response.avg_response[zero], 0.0);

        let h = inst.h_matrix();
        let base = solve_bp(&BasisPursuitLp::new(&h, &inst.y), 1e-12).unwrap();
        for (k, &a) in rep.response.node_ids.iter().enumerate() {
            let s = &rep.response.staircases[k];
            let u0 = s[zero].unwrap();
            assert!((u0 - (base.x_hat[a] - inst.x0[a])).abs() < 1e-9);
            for w in s.windows(2) {
                assert!(w[1].unwrap() >= w[0].unwrap() - 1e-8, "node {a}: {:?}", s);
            }
        }
        for w in rep.response.avg_response.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn duplicate_reports_have_zero_stderr() {
        let inst = small_instance(40, 16, 6, 3);
        let rep = run_response_experiment(&inst, &default_f_grid(), NodeSample::Count(6), 1).unwrap();
        let (mean, se) = estimate_empirical_chi(&[rep.clone(), rep.clone()]).unwrap();
        assert_eq!(se, 0.0);
        assert_eq!(Some(mean), rep.response.fitted_chi);
        assert!(matches!(estimate_empirical_chi(&[rep]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn reports_are_deterministic() {
        let inst = small_instance(50, 20, 5, 8);
        let a = run_response_experiment(&inst, &default_f_grid(), NodeSample::Count(10), 3).unwrap();
        let b = run_response_experiment(&inst, &default_f_grid(), NodeSample::Count(10), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn square_system_has_zero_mse() {
        let rows = mse_sweep(&[1.0], 0.2, 40, 3, 5).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].mse_median < 1e-20, "{:?}", rows[0]);
        assert_eq!(rows[0].q_meanfield, Some(0.0));
        assert_eq!(rows[0].n_fail, 0);
    }

    #[test]
    fn slope_needs_points_on_both_sides() {
        let g = [-0.01, -0.005, 0.0, 0.005, 0.01];
        assert_eq!(fit_slope(&g, &[0.0; 5], 0.01), None);
        let g = [-0.003, -0.002, -0.001, 0.0, 0.001, 0.002, 0.003];
        let r: Vec<f64> = g.iter().map(|f| 2.0 * f).collect();
        assert!((fit_slope(&g, &r, 0.01).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
