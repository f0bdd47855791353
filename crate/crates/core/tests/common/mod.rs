//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use l1cavity::lp::{solve_bp, BasisPursuitLp, LpStatus};
use l1cavity::meanfield::{l1_moments_closed_form, quenched_moments_quadrature, MeanFieldState};
use l1cavity::model::{derive_seed, EnsembleParams, PenaltyModel, SignalPrior};
use l1cavity::quad::QuadratureOptions;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

/// Minimizer of `(x − t)²/(2s) + U(x)` by repeated zooming grid search.
pub fn grid_prox(pen: &PenaltyModel, t: f64, s: f64) -> f64 {
    let g = |x: f64| (x - t) * (x - t) / (2.0 * s) + pen.value(x);
    let (mut lo, mut hi) = (t.min(0.0) - 1e-3, t.max(0.0) + 1e-3);
    let pts = 201;
    while hi - lo > 1e-10 {
        let step = (hi - lo) / (pts - 1) as f64;
        let best = (0..pts)
            .map(|i| lo + step * i as f64)
            .min_by(|a, b| g(*a).total_cmp(&g(*b)))
            .unwrap();
        lo = best - 2.0 * step;
        hi = best + 2.0 * step;
    }
    0.5 * (lo + hi)
}

pub fn random_penalty(rng: &mut impl Rng) -> PenaltyModel {
    let lambda = 10f64.powf(rng.random_range(-1.0..0.7));
    match rng.random_range(0..3) {
        0 => PenaltyModel::l1(lambda).unwrap(),
        1 => PenaltyModel::smoothed_l1(lambda, 10f64.powf(rng.random_range(-3.0..0.0))).unwrap(),
        _ => PenaltyModel::ridge(lambda).unwrap(),
    }
}

/// Largest `|prox − grid search|` over `cases` random penalties and inputs.
pub fn prox_vs_grid_max_err(cases: usize, seed: u64) -> f64 {
    (0..cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 11, i as u64));
            let pen = random_penalty(&mut rng);
            let t = rng.random_range(-5.0..5.0);
            let s = 10f64.powf(rng.random_range(-1.3..0.7));
            (pen.prox(t, s) - grid_prox(&pen, t, s)).abs()
        })
        .reduce(|| 0.0, f64::max)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Optimal value of `min ‖x‖₁ − f·x_a` s.t. `Hx = y`, by enumerating
/// every choice of `M` support columns.
pub fn vertex_enumeration_optimum(h: &DMatrix<f64>, y: &[f64], node: Option<usize>, f: f64) -> Option<f64> {
    let (m, n) = h.shape();
    let rhs = nalgebra::DVector::from_column_slice(y);
    let mut best: Option<f64> = None;
    for cols in combinations(n, m) {
        let b = h.select_columns(cols.iter());
        let lu = b.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(xs) = lu.solve(&rhs) else { continue };
        let mut obj: f64 = xs.iter().map(|v| v.abs()).sum();
        if let Some(a) = node {
            if let Some(p) = cols.iter().position(|c| *c == a) {
                obj -= f * xs[p];
            }
        }
        best = Some(best.map_or(obj, |b: f64| b.min(obj)));
    }
    best
}

/// `|simplex − enumeration|` for one random small instance.
pub fn lp_vs_enumeration(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 12, 0));
    let n = rng.random_range(2..=10usize);
    let m = rng.random_range(1..=n.min(6));
    let entry = Normal::new(0.0, (1.0 / m as f64).sqrt()).unwrap();
    let h = DMatrix::from_fn(m, n, |_, _| entry.sample(&mut rng));
    let mut x0 = vec![0.0; n];
    for _ in 0..rng.random_range(0..=m) {
        x0[rng.random_range(0..n)] = StandardNormal.sample(&mut rng);
    }
    let y: Vec<f64> = (h.clone() * nalgebra::DVector::from_column_slice(&x0)).iter().copied().collect();
    let (node, f) = if seed % 2 == 1 {
        (Some(rng.random_range(0..n)), rng.random_range(-0.9..0.9))
    } else {
        (None, 0.0)
    };
    let lp = match node {
        Some(a) => BasisPursuitLp::perturbed(&h, &y, a, f),
        None => BasisPursuitLp::new(&h, &y),
    };
    let sol = solve_bp(&lp, lp.default_feas_tol()).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal, "seed {seed}");
    let reference = vertex_enumeration_optimum(&h, &y, node, f).expect("some vertex");
    (sol.objective - reference).abs() / reference.abs().max(1.0)
}

/// One Monte-Carlo comparison.
#[derive(Debug, Clone)]
pub struct McCheck {
    pub label: &'static str,
    pub mc: f64,
    pub stderr: f64,
    pub reference: f64,
}

impl McCheck {
    pub fn rel_err(&self) -> f64 {
        (self.mc - self.reference).abs() / self.reference.abs()
    }
}

/// Mean and standard error of `(û², χ_local)` under the quenched measure.
/// The prior branch is stratified exactly and each chunk is a Latin-hypercube
/// sample over the quantiles of (x0 + ξ, x0 | x0 + ξ); the standard error comes from the
/// spread of chunk means.
fn mc_moments(state: &MeanFieldState, pen: &PenaltyModel, prior: &SignalPrior, samples: usize, seed: u64) -> [(f64, f64); 2] {
    const CHUNKS: usize = 100;
    let per = samples / CHUNKS;
    let sx = state.sigma_xi2.sqrt();
    let s = state.sigma_eff2;
    let sd0 = prior.var0.sqrt();
    let normal = StatNormal::standard();
    let means: Vec<[f64; 2]> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 13, c as u64));
            let n1 = (prior.rho * per as f64).round() as usize;
            let n0 = per - n1;
            let strata = |n: usize, rng: &mut ChaCha20Rng| -> Vec<f64> {
                let mut v: Vec<f64> = (0..n)
                    .map(|j| normal.inverse_cdf((j as f64 + rng.random::<f64>()) / n as f64))
                    .collect();
                v.shuffle(rng);
                v
            };
            let mut branch = |n: usize, signal: bool| -> [f64; 2] {
                // w = x0 + ξ is drawn first and x0 from its conditional law,
                // so the threshold in w falls along one stratified axis.
                let (v0, vx) = if signal { (sd0 * sd0, sx * sx) } else { (0.0, sx * sx) };
                let sw = (v0 + vx).sqrt();
                let (k, sc) = (v0 / (v0 + vx), (v0 * vx / (v0 + vx)).sqrt());
                // Antithetic ±b pairs cancel the term odd in the conditional draw.
                let half = n / 2;
                let zw = strata(half, &mut rng);
                let zc = if signal { strata(half, &mut rng) } else { vec![0.0; half] };
                let mut acc = [0.0; 2];
                for (a, b) in zw.iter().zip(&zc) {
                    let w = sw * a;
                    let x = pen.prox(w, s);
                    let chi = pen.local_susceptibility(x, s);
                    for x0 in [k * w + sc * b, k * w - sc * b] {
                        acc[0] += (x - x0) * (x - x0);
                        acc[1] += chi;
                    }
                }
                let n = 2 * half;
                acc.map(|a| a / n.max(1) as f64)
            };
            let sig = branch(n1, true);
            let null = branch(n0, false);
            let w = n1 as f64 / per as f64;
            [w * sig[0] + (1.0 - w) * null[0], w * sig[1] + (1.0 - w) * null[1]]
        })
        .collect();
    let stat = |k: usize| {
        let n = CHUNKS as f64;
        let mean = means.iter().map(|m| m[k]).sum::<f64>() / n;
        let var = means.iter().map(|m| (m[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    [stat(0), stat(1)]
}

/// Closed-form (L1) and quadrature (SmoothedL1) quenched moments against
/// Monte Carlo with `samples` draws each.
pub fn mc_vs_quadrature(samples: usize, seed: u64) -> Vec<McCheck> {
    let prior = SignalPrior::standard(0.2).unwrap();
    let params = EnsembleParams::new(0.5, 1.0, 0.0).unwrap();
    let mut out = Vec::new();

    let l1 = PenaltyModel::l1(1.0).unwrap();
    let st = MeanFieldState::from_order_parameters(0.1, 0.3, &params, &l1);
    let (q, chi) = l1_moments_closed_form(&st, &prior);
    let [(mq, sq), (mc, sc)] = mc_moments(&st, &l1, &prior, samples, seed);
    out.push(McCheck { label: "l1 q", mc: mq, stderr: sq, reference: q });
    out.push(McCheck { label: "l1 chi", mc, stderr: sc, reference: chi });

    let sm = PenaltyModel::smoothed_l1(1.0, 0.05).unwrap();
    let st = MeanFieldState::from_order_parameters(0.1, 0.3, &params, &sm);
    let (q, chi) = quenched_moments_quadrature(&st, &sm, &prior, &QuadratureOptions::default()).unwrap();
    let [(mq, sq), (mc, sc)] = mc_moments(&st, &sm, &prior, samples, seed + 1);
    out.push(McCheck { label: "smoothed_l1 q", mc: mq, stderr: sq, reference: q });
    out.push(McCheck { label: "smoothed_l1 chi", mc, stderr: sc, reference: chi });
    out
}
