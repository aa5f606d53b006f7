//! Cost structures, supply dynamics and the initial distribution of agents.
//!
//! The running cost is separable, `L(x, v) = ℓ(v) + V(x)` with
//! `V(x) = η/2 (x − κ)²`, and the terminal cost is `u_T(x) = γ/2 (x − ζ)²`.
//! Two control costs are supported:
//!
//! ```text
//! Quadratic         ℓ(v) = c/2 v²
//! QuarticPerturbed  ℓ(v) = c/4 v² + c/8 (v − 1)⁴
//! ```
//!
//! The Hamiltonian is `H(x, p) = sup_v { −p v − L(x, v) }`; only its partial
//! derivatives are ever needed, and `H_p(x, p) = −v†(p)` where `v†(p)` solves
//! `ℓ'(v) = −p`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};

/// Uniform time discretisation of `[0, T]` with `M` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter {
                field: "horizon",
                reason: format!("must be finite and > 0, got {horizon}"),
            });
        }
        if steps < 2 {
            return Err(Error::InvalidParameter {
                field: "steps",
                reason: format!("must be >= 2, got {steps}"),
            });
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time `t_k`; the last node is exactly `T`.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    /// The same horizon with every step split into `factor` sub-steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.steps * factor.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Quadratic,
    QuarticPerturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub eta: f64,
    pub kappa: f64,
    pub c: f64,
    pub gamma: f64,
    pub zeta: f64,
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 100;

impl CostSpec {
    pub fn new(kind: CostKind, eta: f64, kappa: f64, c: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let cost = Self {
            kind,
            eta,
            kappa,
            c,
            gamma,
            zeta,
        };
        cost.validate()?;
        Ok(cost)
    }

    /// Parameters used for every numerical experiment: c = 1, γ = e⁻¹, ζ = 1, η = 1, κ = 1.
    pub fn reference(kind: CostKind) -> Self {
        Self {
            kind,
            eta: 1.0,
            kappa: 1.0,
            c: 1.0,
            gamma: (-1.0f64).exp(),
            zeta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.eta, self.kappa, self.c, self.gamma, self.zeta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter {
                field: "cost",
                reason: "all cost parameters must be finite".into(),
            });
        }
        if self.c <= 0.0 {
            return Err(Error::InvalidParameter {
                field: "c",
                reason: format!("must be > 0, got {}", self.c),
            });
        }
        if self.eta < 0.0 {
            return Err(Error::InvalidParameter {
                field: "eta",
                reason: format!("must be >= 0, got {}", self.eta),
            });
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidParameter {
                field: "gamma",
                reason: format!("must be >= 0, got {}", self.gamma),
            });
        }
        Ok(())
    }

    /// State potential `V(x)`.
    pub fn potential(&self, x: f64) -> f64 {
        let d = x - self.kappa;
        0.5 * self.eta * d * d
    }

    pub fn potential_prime(&self, x: f64) -> f64 {
        self.eta * (x - self.kappa)
    }

    /// Control cost `ℓ(v)`.
    pub fn control_cost(&self, v: f64) -> f64 {
        match self.kind {
            CostKind::Quadratic => 0.5 * self.c * v * v,
            CostKind::QuarticPerturbed => {
                let w = v - 1.0;
                0.25 * self.c * v * v + 0.125 * self.c * w * w * w * w
            }
        }
    }

    /// `ℓ'(v)`, strictly increasing for both families.
    pub fn control_cost_prime(&self, v: f64) -> f64 {
        match self.kind {
            CostKind::Quadratic => self.c * v,
            CostKind::QuarticPerturbed => {
                let w = v - 1.0;
                0.5 * self.c * v + 0.5 * self.c * w * w * w
            }
        }
    }

    /// `ℓ''(v)`, bounded below by `c/2`.
    pub fn control_cost_second(&self, v: f64) -> f64 {
        match self.kind {
            CostKind::Quadratic => self.c,
            CostKind::QuarticPerturbed => {
                let w = v - 1.0;
                0.5 * self.c + 1.5 * self.c * w * w
            }
        }
    }

    pub fn lagrangian(&self, x: f64, v: f64) -> f64 {
        self.control_cost(v) + self.potential(x)
    }

    /// `(L_x, L_v)`.
    pub fn lagrangian_grads(&self, x: f64, v: f64) -> (f64, f64) {
        (self.potential_prime(x), self.control_cost_prime(v))
    }

    /// The maximiser `v†(p)` of `−p v − ℓ(v)`, i.e. the root of `ℓ'(v) = −p`.
    pub fn optimal_control(&self, p: f64) -> Result<f64> {
        match self.kind {
            CostKind::Quadratic => Ok(-p / self.c),
            CostKind::QuarticPerturbed => self.solve_control_newton(p),
        }
    }

    /// `(H_x, H_p)` at `(x, p)`. `H_x = −V'(x)` does not depend on `p`.
    pub fn hamiltonian_grads(&self, x: f64, p: f64) -> Result<(f64, f64)> {
        let v = self.optimal_control(p)?;
        Ok((-self.potential_prime(x), -v))
    }

    /// `(u_T(x), u_T'(x))`.
    pub fn terminal(&self, x: f64) -> (f64, f64) {
        let d = x - self.zeta;
        (0.5 * self.gamma * d * d, self.gamma * d)
    }

    // Newton on g(v) = ℓ'(v) + p with a bisection fallback; g is a strictly
    // increasing cubic so a sign-changing bracket always exists.
    fn solve_control_newton(&self, p: f64) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::NonConvergence {
                p,
                residual: f64::NAN,
            });
        }
        let g = |v: f64| self.control_cost_prime(v) + p;
        let reach = p.abs() / self.c + 2.0;
        let (mut lo, mut hi) = (-reach, reach);
        while g(lo) > 0.0 {
            lo *= 2.0;
        }
        while g(hi) < 0.0 {
            hi *= 2.0;
        }
        // the cubic part dominates for large |p|; start from its inverse
        let mut v = (1.0 - (2.0 * p / self.c).cbrt()).clamp(lo, hi);
        let mut residual = g(v);
        for _ in 0..NEWTON_MAX_ITERS {
            if residual.abs() <= NEWTON_TOL {
                return Ok(v);
            }
            if residual < 0.0 {
                lo = v;
            } else {
                hi = v;
            }
            if hi - lo <= 4.0 * f64::EPSILON * v.abs().max(1.0) {
                return Ok(v);
            }
            let step = residual / self.control_cost_second(v);
            let mut next = v - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            v = next;
            residual = g(v);
        }
        if residual.abs() <= NEWTON_TOL {
            Ok(v)
        } else {
            Err(Error::NonConvergence { p, residual })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplyKind {
    /// `Q̄(t) ≡ 1`.
    ConstantMean,
    /// `Q̄(t) = 7 e^{−t} sin(3πt)`.
    OscillatingMean,
}

/// Mean-reverting supply `Q' = Q̄ − Q`, `Q(0) = q0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupplySpec {
    pub kind: SupplyKind,
    pub q0: f64,
}

const OSC_FREQ: f64 = 3.0 * PI;
const OSC_AMPLITUDE: f64 = 7.0;

impl SupplySpec {
    pub fn new(kind: SupplyKind, q0: f64) -> Self {
        Self { kind, q0 }
    }

    /// The reversion target `Q̄(t)`.
    pub fn mean_target(&self, t: f64) -> f64 {
        match self.kind {
            SupplyKind::ConstantMean => 1.0,
            SupplyKind::OscillatingMean => OSC_AMPLITUDE * (-t).exp() * (OSC_FREQ * t).sin(),
        }
    }

    /// Closed-form `Q(t)` without a domain check.
    pub fn value(&self, t: f64) -> f64 {
        let e = (-t).exp();
        match self.kind {
            SupplyKind::ConstantMean => 1.0 + (self.q0 - 1.0) * e,
            SupplyKind::OscillatingMean => {
                e * (self.q0 + OSC_AMPLITUDE * (1.0 - (OSC_FREQ * t).cos()) / OSC_FREQ)
            }
        }
    }

    /// `Q(t)` for `t ∈ [0, T]`.
    pub fn at(&self, grid: &TimeGrid, t: f64) -> Result<f64> {
        if !(0.0..=grid.horizon()).contains(&t) {
            return Err(Error::Domain {
                t,
                horizon: grid.horizon(),
            });
        }
        Ok(self.value(t))
    }

    /// `∫_0^t Q(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        let e = (-t).exp();
        match self.kind {
            SupplyKind::ConstantMean => t + (self.q0 - 1.0) * (1.0 - e),
            SupplyKind::OscillatingMean => {
                let k = OSC_AMPLITUDE / OSC_FREQ;
                let cos_part = osc_f(t) - osc_f(0.0);
                (self.q0 + k) * (1.0 - e) - k * cos_part
            }
        }
    }

    /// `∫_0^t ∫_0^s Q(r) dr ds`.
    pub fn double_integral(&self, t: f64) -> f64 {
        let e = (-t).exp();
        match self.kind {
            SupplyKind::ConstantMean => 0.5 * t * t + (self.q0 - 1.0) * (t - 1.0 + e),
            SupplyKind::OscillatingMean => {
                let k = OSC_AMPLITUDE / OSC_FREQ;
                let cos_part = osc_g(t) - osc_g(0.0) - t * osc_f(0.0);
                (self.q0 + k) * (t - 1.0 + e) - k * cos_part
            }
        }
    }

    /// `Q(t_k)` at every grid node.
    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.nodes().into_iter().map(|t| self.value(t)).collect()
    }
}

// Antiderivative of e^{−s} cos(ωs).
fn osc_f(s: f64) -> f64 {
    let w = OSC_FREQ;
    (-s).exp() * (w * (w * s).sin() - (w * s).cos()) / (1.0 + w * w)
}

// Antiderivative of osc_f.
fn osc_g(s: f64) -> f64 {
    let w = OSC_FREQ;
    let d = 1.0 + w * w;
    (-s).exp() * (-2.0 * w * (w * s).sin() + (1.0 - w * w) * (w * s).cos()) / (d * d)
}

/// Gaussian initial distribution `m_0 = N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDist {
    pub mean: f64,
    pub std: f64,
}

impl InitialDist {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0) || !mean.is_finite() {
            return Err(Error::InvalidParameter {
                field: "std",
                reason: format!("need finite mean and std > 0, got ({mean}, {std})"),
            });
        }
        Ok(Self { mean, std })
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let normal = Normal::new(self.mean, self.std).expect("std validated positive");
        (0..n).map(|_| normal.sample(rng)).collect()
    }

    /// Density of `m_0` at `x`.
    pub fn density(&self, x: f64) -> f64 {
        gaussian_density(self.mean, self.std, x)
    }
}

pub fn gaussian_density(mean: f64, std: f64, x: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

/// `n` draws from `dist`, deterministic in `seed`.
pub fn sample_initial_positions(dist: &InitialDist, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.sample_with(&mut rng, n)
}

/// Stratified sample `mean + std Φ⁻¹((i + ½)/n)`, `i = 0..n`, symmetric
/// about `mean` with no sampling noise in the mean.
pub fn quantile_positions(dist: &InitialDist, n: usize) -> Vec<f64> {
    let normal = statrs::distribution::Normal::new(dist.mean, dist.std).expect("std validated positive");
    (0..n)
        .map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64))
        .collect()
}
