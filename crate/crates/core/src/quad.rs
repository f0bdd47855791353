//! Gaussian special functions and composite Gauss–Legendre quadrature.
//!
//! Quenched averages in this crate are expectations of piecewise-smooth
//! functions under a centred Gaussian. The integration range is cut at the
//! points where the integrand has a kink (the prox thresholds), each piece is
//! integrated with an `n`-point Gauss–Legendre rule, and `n` is doubled until
//! successive estimates agree.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, Mutex, OnceLock};

use libm::erfc;

use crate::error::{Error, Result};

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Upper tail `Q(z) = P(Z > z)` of the standard normal.
pub fn normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    normal_tail(-z)
}

/// Nodes and weights of an `n`-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LegendreRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LegendreRule {
    fn compute(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Cached rule of order `n`.
    pub fn get(n: usize) -> Arc<LegendreRule> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<LegendreRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| Arc::new(LegendreRule::compute(n)))
            .clone()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Order-doubling schedule and stopping rule for composite quadrature.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions {
    pub start_order: usize,
    pub max_order: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            start_order: 61,
            max_order: 1921,
            rel_tol: 1e-8,
            abs_tol: 1e-15,
        }
    }
}

/// Integrates a vector-valued `f` over `[lo, hi]`, splitting at `breaks`.
pub fn integrate_fixed<const K: usize, F>(f: &F, lo: f64, hi: f64, breaks: &[f64], order: usize) -> [f64; K]
where
    F: Fn(f64) -> [f64; K],
{
    let mut cuts: Vec<f64> = Vec::with_capacity(breaks.len() + 2);
    cuts.push(lo);
    cuts.extend(breaks.iter().copied().filter(|b| b.is_finite() && *b > lo && *b < hi));
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let rule = LegendreRule::get(order);
    let mut acc = [0.0; K];
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        if half <= 0.0 {
            continue;
        }
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let v = f(mid + half * x);
            for k in 0..K {
                acc[k] += half * w * v[k];
            }
        }
    }
    acc
}

/// Adaptive version of [`integrate_fixed`]: doubles the order until the
/// estimate stabilises.
pub fn integrate<const K: usize, F>(f: &F, lo: f64, hi: f64, breaks: &[f64], opts: &QuadratureOptions) -> Result<[f64; K]>
where
    F: Fn(f64) -> [f64; K],
{
    let mut order = opts.start_order;
    let mut prev = integrate_fixed(f, lo, hi, breaks, order);
    loop {
        let next_order = 2 * order - 1;
        if next_order > opts.max_order {
            return Err(Error::Numerical(format!(
                "quadrature did not reach relative tolerance {:e} by order {}",
                opts.rel_tol, order
            )));
        }
        let cur = integrate_fixed(f, lo, hi, breaks, next_order);
        let ok = prev
            .iter()
            .zip(&cur)
            .all(|(p, c)| (c - p).abs() <= opts.rel_tol * c.abs() + opts.abs_tol);
        if ok {
            return Ok(cur);
        }
        prev = cur;
        order = next_order;
    }
}

/// Half-width of the integration window, in standard deviations.
pub const GAUSSIAN_SPAN: f64 = 12.0;

/// `E[f(W)]` for `W ~ N(0, sd²)`, with `kinks` given in `W` units.
///
/// A zero `sd` returns `f(0)` exactly.
pub fn gaussian_expectation<const K: usize, F>(sd: f64, kinks: &[f64], f: F, opts: &QuadratureOptions) -> Result<[f64; K]>
where
    F: Fn(f64) -> [f64; K],
{
    if sd == 0.0 {
        return Ok(f(0.0));
    }
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Domain(format!("gaussian standard deviation must be finite and >= 0, got {sd}")));
    }
    let mut breaks: Vec<f64> = vec![-4.0, 0.0, 4.0];
    breaks.extend(kinks.iter().map(|k| k / sd));
    let g = |z: f64| {
        let v = f(sd * z);
        let p = normal_pdf(z);
        let mut out = [0.0; K];
        for k in 0..K {
            out[k] = v[k] * p;
        }
        out
    };
    integrate(&g, -GAUSSIAN_SPAN, GAUSSIAN_SPAN, &breaks, opts)
}
