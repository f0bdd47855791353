//! Ensemble definition and the decoupled single-variable problem.
//!
//! Every coordinate of the cavity solution solves
//!
//! ```text
//! û(f) = argmin_u  (u² − 2ξu) / (2σ_eff²) + U(u + x0) − f·u
//! ```
//!
//! which in `x = u + x0` coordinates is the proximal map of `σ_eff²·U`
//! evaluated at `x0 + ξ + σ_eff²·f`. All quenched averages in the crate are
//! built on [`scalar_minimize`] and [`PenaltyModel::prox`].

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Separable penalty `U(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyModel {
    /// `λ|x|`
    L1 { lambda: f64 },
    /// `λ√(x² + ε²)`
    SmoothedL1 { lambda: f64, epsilon: f64 },
    /// `λx²/2`
    Ridge { lambda: f64 },
}

impl PenaltyModel {
    pub fn l1(lambda: f64) -> Result<Self> {
        Self::L1 { lambda }.validated()
    }

    pub fn smoothed_l1(lambda: f64, epsilon: f64) -> Result<Self> {
        Self::SmoothedL1 { lambda, epsilon }.validated()
    }

    pub fn ridge(lambda: f64) -> Result<Self> {
        Self::Ridge { lambda }.validated()
    }

    /// Checks `λ ≥ 0` and `ε > 0`.
    pub fn validated(self) -> Result<Self> {
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return domain(format!("penalty strength must be finite and >= 0, got {lambda}"));
        }
        if let Self::SmoothedL1 { epsilon, .. } = self {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return domain(format!("smoothing scale must be finite and > 0, got {epsilon}"));
            }
        }
        Ok(self)
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Self::L1 { lambda } | Self::SmoothedL1 { lambda, .. } | Self::Ridge { lambda } => lambda,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::L1 { .. } => "l1",
            Self::SmoothedL1 { .. } => "smoothed_l1",
            Self::Ridge { .. } => "ridge",
        }
    }

    /// True when `U` has a continuous second derivative everywhere.
    pub fn is_smooth(&self) -> bool {
        !matches!(self, Self::L1 { .. })
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Self::L1 { lambda } => lambda * x.abs(),
            Self::SmoothedL1 { lambda, epsilon } => lambda * x.hypot(epsilon),
            Self::Ridge { lambda } => 0.5 * lambda * x * x,
        }
    }

    /// `U'(x)`; for L1 the subgradient element `λ·sign(x)` (0 at the kink).
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Self::L1 { lambda } => {
                if x == 0.0 {
                    0.0
                } else {
                    lambda * x.signum()
                }
            }
            Self::SmoothedL1 { lambda, epsilon } => lambda * x / x.hypot(epsilon),
            Self::Ridge { lambda } => lambda * x,
        }
    }

    /// `U''(x)`. L1 returns 0 away from the kink and `+∞` at it.
    pub fn second_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::L1 { .. } => {
                if x == 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            Self::SmoothedL1 { lambda, epsilon } => {
                let r = x.hypot(epsilon);
                lambda * epsilon * epsilon / (r * r * r)
            }
            Self::Ridge { lambda } => lambda,
        }
    }

    /// Proximal map `argmin_x (x − t)²/(2s) + U(x)`.
    pub fn prox(&self, t: f64, s: f64) -> f64 {
        match *self {
            Self::L1 { lambda } => shrink(t, lambda * s),
            Self::Ridge { lambda } => t / (1.0 + lambda * s),
            Self::SmoothedL1 { lambda, epsilon } => smoothed_prox(t, s, lambda, epsilon),
        }
    }

    /// Derivative of [`Self::prox`] with respect to `t`, times `s`: the local
    /// susceptibility of the minimizer `x` at effective variance `s`.
    pub fn local_susceptibility(&self, x_hat: f64, s: f64) -> f64 {
        match *self {
            Self::L1 { .. } => {
                if x_hat == 0.0 {
                    0.0
                } else {
                    s
                }
            }
            Self::Ridge { lambda } => s / (1.0 + lambda * s),
            Self::SmoothedL1 { .. } => 1.0 / (self.second_derivative(x_hat) + 1.0 / s),
        }
    }

    /// Input values `t` of [`Self::prox`] where its output is not smooth (or
    /// varies on a scale much finer than `s`), for quadrature splitting.
    pub fn prox_breakpoints(&self, s: f64) -> Vec<f64> {
        match *self {
            Self::L1 { lambda } => vec![-lambda * s, lambda * s],
            Self::SmoothedL1 { lambda, epsilon } => {
                let th = lambda * s;
                vec![-th - epsilon, -th, -th + epsilon, 0.0, th - epsilon, th, th + epsilon]
            }
            Self::Ridge { .. } => Vec::new(),
        }
    }
}

/// Soft threshold `sign(t)·max(|t| − θ, 0)`. Ties go to zero.
pub fn shrink(t: f64, theta: f64) -> f64 {
    if t.abs() <= theta {
        0.0
    } else {
        t - theta * t.signum()
    }
}

/// Safeguarded Newton on the strictly increasing gradient
/// `g(x) = (x − t)/s + λx/√(x² + ε²)`, whose root lies in `[t − λs, t + λs]`.
fn smoothed_prox(t: f64, s: f64, lambda: f64, epsilon: f64) -> f64 {
    let grad = |x: f64| (x - t) / s + lambda * x / x.hypot(epsilon);
    let hess = |x: f64| {
        let r = x.hypot(epsilon);
        1.0 / s + lambda * epsilon * epsilon / (r * r * r)
    };
    let mut lo = t - lambda * s;
    let mut hi = t + lambda * s;
    if lo == hi {
        return t;
    }
    let mut x = shrink(t, lambda * s).clamp(lo, hi);
    for _ in 0..200 {
        let g = grad(x);
        if g.abs() <= 1e-12 {
            return x;
        }
        if g > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - g / hess(x);
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
            return x;
        }
    }
    x
}

/// Gaussian–Bernoulli signal prior: a coordinate is nonzero with probability
/// `rho`, and nonzero values are `N(0, var0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPrior {
    pub rho: f64,
    pub var0: f64,
}

impl SignalPrior {
    pub fn new(rho: f64, var0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return domain(format!("nonzero fraction must lie in [0, 1], got {rho}"));
        }
        if !(var0 > 0.0 && var0.is_finite()) {
            return domain(format!("nonzero variance must be finite and > 0, got {var0}"));
        }
        Ok(Self { rho, var0 })
    }

    /// Standard-Gaussian nonzeros.
    pub fn standard(rho: f64) -> Result<Self> {
        Self::new(rho, 1.0)
    }

    /// `E[x0²] = ρ·var0`.
    pub fn second_moment(&self) -> f64 {
        self.rho * self.var0
    }
}

/// Sampling ratio `α = M/N`, loss scale `σ²` and noise variance `σ_ζ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleParams {
    pub alpha: f64,
    pub sigma2: f64,
    pub sigma_zeta2: f64,
}

impl EnsembleParams {
    pub fn new(alpha: f64, sigma2: f64, sigma_zeta2: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return domain(format!("sampling ratio must be finite and > 0, got {alpha}"));
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return domain(format!("loss scale must be finite and >= 0, got {sigma2}"));
        }
        if !(sigma_zeta2 >= 0.0 && sigma_zeta2.is_finite()) {
            return domain(format!("noise variance must be finite and >= 0, got {sigma_zeta2}"));
        }
        Ok(Self { alpha, sigma2, sigma_zeta2 })
    }
}

/// Environment of one decoupled coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarEnv {
    pub sigma_eff2: f64,
    /// Cavity field ξ.
    pub xi: f64,
    pub x0: f64,
    /// Conjugate field on `u`.
    pub f: f64,
}

impl ScalarEnv {
    pub fn new(sigma_eff2: f64, xi: f64, x0: f64, f: f64) -> Self {
        Self { sigma_eff2, xi, x0, f }
    }

    /// The argument of the prox map, `x0 + ξ + σ_eff²·f`.
    pub fn prox_input(&self) -> f64 {
        self.x0 + self.xi + self.sigma_eff2 * self.f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarResult {
    pub u_hat: f64,
    pub x_hat: f64,
    /// `dû/df` at `f = 0`.
    pub chi_local: f64,
}

/// Global minimizer of the single-variable cost and its local susceptibility.
pub fn scalar_minimize(env: &ScalarEnv, penalty: &PenaltyModel) -> Result<ScalarResult> {
    let s = env.sigma_eff2;
    if !(s > 0.0 && s.is_finite()) {
        return domain(format!("effective variance must be finite and > 0, got {s}"));
    }
    let x_hat = penalty.prox(env.prox_input(), s);
    let u_hat = x_hat - env.x0;
    Ok(ScalarResult {
        u_hat,
        x_hat: u_hat + env.x0,
        chi_local: penalty.local_susceptibility(x_hat, s),
    })
}

/// Largest `N·M` accepted by [`draw_instance`].
pub const MAX_MATRIX_ENTRIES: usize = 1 << 27;

/// One quenched draw `(H, x0, y)` with `y = H·x0 + ζ`.
///
/// `h` is stored row-major, `M` rows by `N` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstance {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub prior: SignalPrior,
    pub noise_var: f64,
    pub h: Vec<f64>,
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
}

/// How the support of `x0` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    /// Each coordinate independently nonzero with probability `ρ`.
    Bernoulli,
    /// Exactly `k` coordinates, placed uniformly at random.
    Exact(usize),
}

/// Draws an instance with Bernoulli(ρ) support.
pub fn draw_instance(n: usize, m: usize, prior: &SignalPrior, noise_var: f64, seed: u64) -> Result<ProblemInstance> {
    draw_instance_with(n, m, prior, Support::Bernoulli, noise_var, seed)
}

/// Draws an instance; `H` has i.i.d. `N(0, 1/M)` entries.
pub fn draw_instance_with(
    n: usize,
    m: usize,
    prior: &SignalPrior,
    support: Support,
    noise_var: f64,
    seed: u64,
) -> Result<ProblemInstance> {
    if n == 0 || m == 0 {
        return domain("instance dimensions must be positive");
    }
    if n.saturating_mul(m) > MAX_MATRIX_ENTRIES {
        return domain(format!("instance of {m}x{n} exceeds the size cap of {MAX_MATRIX_ENTRIES} entries"));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return domain(format!("noise variance must be finite and >= 0, got {noise_var}"));
    }
    if let Support::Exact(k) = support {
        if k > n {
            return domain(format!("support size {k} exceeds N = {n}"));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let entry = Normal::new(0.0, (1.0 / m as f64).sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let h: Vec<f64> = (0..n * m).map(|_| entry.sample(&mut rng)).collect();

    let value = Normal::new(0.0, prior.var0.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let mut x0 = vec![0.0; n];
    match support {
        Support::Bernoulli => {
            for x in x0.iter_mut() {
                if rng.random::<f64>() < prior.rho {
                    *x = value.sample(&mut rng);
                }
            }
        }
        Support::Exact(k) => {
            let mut idx = index::sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            for a in idx {
                x0[a] = value.sample(&mut rng);
            }
        }
    }

    let mut y = vec![0.0; m];
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = dot(&h[i * n..(i + 1) * n], &x0);
    }
    if noise_var > 0.0 {
        let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
        for yi in y.iter_mut() {
            *yi += noise.sample(&mut rng);
        }
    }

    Ok(ProblemInstance {
        n,
        m,
        seed,
        prior: *prior,
        noise_var,
        h,
        x0,
        y,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ProblemInstance {
    pub fn alpha(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    /// Number of nonzero entries of `x0`.
    pub fn support_size(&self) -> usize {
        self.x0.iter().filter(|x| **x != 0.0).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.h[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, a: usize) -> Vec<f64> {
        (0..self.m).map(|i| self.h[i * self.n + a]).collect()
    }

    /// `H·x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.n, &self.h)
    }

    /// Mean squared estimation error `‖x − x0‖²/N`.
    pub fn mse(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.n as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(s)?;
        if inst.h.len() != inst.n * inst.m || inst.x0.len() != inst.n || inst.y.len() != inst.m {
            return Err(Error::Domain("instance record has inconsistent dimensions".into()));
        }
        Ok(inst)
    }
}

/// Counter-based seed split: the seed of item `index` in stream `stream`
/// depends only on `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = splitmix(master ^ splitmix(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    z = splitmix(z ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn env(s: f64, xi: f64, x0: f64, f: f64) -> ScalarEnv {
        ScalarEnv::new(s, xi, x0, f)
    }

    #[test]
    fn threshold_kills_zero_input() {
        let r = scalar_minimize(&env(1.0, 0.0, 0.0, 0.0), &PenaltyModel::l1(0.5).unwrap()).unwrap();
        assert_eq!(r.u_hat, 0.0);
        assert_eq!(r.chi_local, 0.0);
    }

    #[test]
    fn ridge_closed_form() {
        let r = scalar_minimize(&env(1.0, 0.3, 0.0, 0.0), &PenaltyModel::ridge(1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(r.u_hat, 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(r.chi_local, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn threshold_tie_goes_to_zero_branch() {
        // |x0 + ξ| exactly at λσ² = 1.
        let r = scalar_minimize(&env(2.0, 0.25, 0.75, 0.0), &PenaltyModel::l1(0.5).unwrap()).unwrap();
        assert_eq!(r.x_hat, 0.0);
        assert_eq!(r.chi_local, 0.0);
    }

    #[test]
    fn rejects_nonpositive_variance() {
        let p = PenaltyModel::l1(1.0).unwrap();
        assert!(matches!(scalar_minimize(&env(0.0, 0.0, 0.0, 0.0), &p), Err(Error::Domain(_))));
        assert!(matches!(scalar_minimize(&env(-1.0, 0.0, 0.0, 0.0), &p), Err(Error::Domain(_))));
    }

    #[test]
    fn penalty_validation() {
        assert!(PenaltyModel::l1(-0.1).is_err());
        assert!(PenaltyModel::smoothed_l1(1.0, 0.0).is_err());
        assert!(PenaltyModel::ridge(f64::NAN).is_err());
        assert!(SignalPrior::new(1.5, 1.0).is_err());
        assert!(SignalPrior::new(0.2, 0.0).is_err());
        assert!(EnsembleParams::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn smoothed_value_close_to_l1() {
        let p = PenaltyModel::smoothed_l1(0.7, 1e-2).unwrap();
        for i in -200..=200 {
            let x = i as f64 * 0.013;
            assert!((p.value(x) - 0.7 * x.abs()).abs() <= 0.7 * 1e-2 + 1e-15);
        }
    }

    #[test]
    fn smoothed_prox_solves_stationarity() {
        let p = PenaltyModel::smoothed_l1(1.3, 1e-3).unwrap();
        for &(t, s) in &[(2.0, 1.0), (0.5, 1.0), (-3.0, 0.4), (1e-4, 2.0), (0.0, 1.0)] {
            let x = p.prox(t, s);
            assert!(((x - t) / s + p.derivative(x)).abs() < 1e-10, "t={t} s={s} x={x}");
        }
    }

    #[test]
    fn noiseless_instance_is_consistent() {
        let prior = SignalPrior::standard(1.0).unwrap();
        let inst = draw_instance(4, 2, &prior, 0.0, 7).unwrap();
        let hx = inst.apply(&inst.x0);
        assert_eq!(hx, inst.y);
        assert_eq!(inst.seed, 7);
    }

    #[test]
    fn exact_support_size() {
        let prior = SignalPrior::standard(0.2).unwrap();
        let inst = draw_instance_with(200, 100, &prior, Support::Exact(40), 0.0, 3).unwrap();
        assert_eq!(inst.support_size(), 40);
    }

    #[test]
    fn instance_json_round_trip_is_exact() {
        let prior = SignalPrior::new(0.3, 2.0).unwrap();
        let inst = draw_instance(13, 7, &prior, 0.01, 99).unwrap();
        let back = ProblemInstance::from_json(&inst.to_json().unwrap()).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn size_cap_enforced() {
        let prior = SignalPrior::standard(0.1).unwrap();
        assert!(draw_instance(1 << 20, 1 << 10, &prior, 0.0, 0).is_err());
    }

    #[test]
    fn seeds_split_deterministically() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
    }
}
