//! Closed-form solution of the linear-quadratic price problem.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CostKind, CostSpec, InitialDist, SupplySpec, TimeGrid};
use crate::rollout::TrajectoryBatch;

/// Sub-steps per grid step used for the coefficient and density ODEs.
pub const DEFAULT_REFINE: usize = 16;

fn require_quadratic(cost: &CostSpec) -> Result<()> {
    match cost.kind {
        CostKind::Quadratic => Ok(()),
        CostKind::QuarticPerturbed => Err(Error::WrongCostKind),
    }
}

/// The explicit equilibrium price for a given initial mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqPrice {
    pub cost: CostSpec,
    pub supply: SupplySpec,
    pub mbar0: f64,
    pub horizon: f64,
}

impl LqPrice {
    pub fn new(cost: &CostSpec, supply: &SupplySpec, horizon: f64, mbar0: f64) -> Result<Self> {
        require_quadratic(cost)?;
        Ok(Self {
            cost: *cost,
            supply: *supply,
            mbar0,
            horizon,
        })
    }

    /// `ϖ(t) = η(κ−m̄₀)(T−t) + γ(ζ−m̄₀) − η∫_t^T∫_0^s Q − γ∫_0^T Q − cQ(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let CostSpec {
            eta,
            kappa,
            c,
            gamma,
            zeta,
            ..
        } = self.cost;
        let (s, m) = (&self.supply, self.mbar0);
        let big_t = self.horizon;
        eta * (kappa - m) * (big_t - t) + gamma * (zeta - m)
            - eta * (s.double_integral(big_t) - s.double_integral(t))
            - gamma * s.integral(big_t)
            - c * s.value(t)
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.nodes().into_iter().map(|t| self.eval(t)).collect()
    }
}

/// Closed-form price at every node of `grid`.
pub fn lq_price(
    cost: &CostSpec,
    supply: &SupplySpec,
    grid: &TimeGrid,
    mbar0: f64,
) -> Result<Vec<f64>> {
    Ok(LqPrice::new(cost, supply, grid.horizon(), mbar0)?.sample(grid))
}

/// Coefficients of `u(t,x) = a0(t) + a1(t)x + a2(t)x²`, sampled on the
/// coarse grid and on the refined integration grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqCoefficients {
    pub grid: TimeGrid,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub refine: usize,
    pub fine_grid: TimeGrid,
    pub fine_a0: Vec<f64>,
    pub fine_a1: Vec<f64>,
    pub fine_a2: Vec<f64>,
}

impl LqCoefficients {
    pub fn value(&self, k: usize, x: f64) -> f64 {
        self.a0[k] + self.a1[k] * x + self.a2[k] * x * x
    }
}

fn coefficient_rhs(cost: &CostSpec, w: f64, y: [f64; 3]) -> [f64; 3] {
    let [a2, a1, _] = y;
    let c = cost.c;
    [
        2.0 / c * a2 * a2 - 0.5 * cost.eta,
        2.0 / c * a2 * (w + a1) + cost.eta * cost.kappa,
        (w + a1).powi(2) / (2.0 * c) - 0.5 * cost.eta * cost.kappa * cost.kappa,
    ]
}

/// Backward RK4 for the Riccati system obtained by inserting the quadratic
/// ansatz into `−u_t + H(x, ϖ + u_x) = 0`:
///
/// ```text
/// a2' = (2/c) a2² − η/2
/// a1' = (2/c) a2 (ϖ + a1) + ηκ
/// a0' = (ϖ + a1)² / (2c) − ηκ²/2
/// ```
///
/// with `a2(T) = γ/2`, `a1(T) = −γζ`, `a0(T) = γζ²/2`.
pub fn lq_coefficients(
    cost: &CostSpec,
    price: &dyn Fn(f64) -> f64,
    grid: &TimeGrid,
    refine: usize,
) -> Result<LqCoefficients> {
    require_quadratic(cost)?;
    let refine = refine.max(1);
    let fine = grid.refined(refine)?;
    let n = fine.steps();
    let h = fine.dt();
    let mut y = [
        0.5 * cost.gamma,
        -cost.gamma * cost.zeta,
        0.5 * cost.gamma * cost.zeta * cost.zeta,
    ];
    let mut path = vec![[0.0; 3]; n + 1];
    path[n] = y;
    let axpy = |y: [f64; 3], s: f64, d: [f64; 3]| [y[0] + s * d[0], y[1] + s * d[1], y[2] + s * d[2]];
    for j in (0..n).rev() {
        let t = fine.t(j + 1);
        let tm = t - 0.5 * h;
        let t0 = fine.t(j);
        let k1 = coefficient_rhs(cost, price(t), y);
        let k2 = coefficient_rhs(cost, price(tm), axpy(y, -0.5 * h, k1));
        let k3 = coefficient_rhs(cost, price(tm), axpy(y, -0.5 * h, k2));
        let k4 = coefficient_rhs(cost, price(t0), axpy(y, -h, k3));
        for i in 0..3 {
            y[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("riccati coefficients"));
        }
        path[j] = y;
    }
    let pick = |i: usize| -> (Vec<f64>, Vec<f64>) {
        let fine_path: Vec<f64> = path.iter().map(|y| y[i]).collect();
        let coarse = (0..=grid.steps()).map(|k| fine_path[k * refine]).collect();
        (coarse, fine_path)
    };
    let (a2, fine_a2) = pick(0);
    let (a1, fine_a1) = pick(1);
    let (a0, fine_a0) = pick(2);
    Ok(LqCoefficients {
        grid: *grid,
        a0,
        a1,
        a2,
        refine,
        fine_grid: fine,
        fine_a0,
        fine_a1,
        fine_a2,
    })
}

/// Finite-difference derivative of a uniformly sampled path at index `j`
/// using five-point stencils (one-sided near the ends).
fn stencil_derivative(f: &[f64], h: f64, j: usize) -> f64 {
    let n = f.len() - 1;
    if j >= 2 && j + 2 <= n {
        (f[j - 2] - 8.0 * f[j - 1] + 8.0 * f[j + 1] - f[j + 2]) / (12.0 * h)
    } else if j < 2 {
        (-25.0 * f[j] + 48.0 * f[j + 1] - 36.0 * f[j + 2] + 16.0 * f[j + 3] - 3.0 * f[j + 4])
            / (12.0 * h)
    } else {
        (25.0 * f[j] - 48.0 * f[j - 1] + 36.0 * f[j - 2] - 16.0 * f[j - 3] + 3.0 * f[j - 4])
            / (12.0 * h)
    }
}

/// L∞ of `−u_t + (ϖ + u_x)²/(2c) − η/2 (x−κ)²` over `nt × nx` collocation
/// points in `[0,T] × [x_lo, x_hi]`. Time points are snapped to the
/// integration grid and `u_t` is a finite difference of the computed paths.
pub fn hj_residual(
    cost: &CostSpec,
    coeffs: &LqCoefficients,
    price: &dyn Fn(f64) -> f64,
    nt: usize,
    (x_lo, x_hi): (f64, f64),
    nx: usize,
) -> Result<f64> {
    require_quadratic(cost)?;
    let fine = &coeffs.fine_grid;
    let n = fine.steps();
    let h = fine.dt();
    let mut worst = 0.0f64;
    for a in 0..nt {
        let j = ((a as f64 / (nt - 1).max(1) as f64) * n as f64).round() as usize;
        let t = fine.t(j);
        let d0 = stencil_derivative(&coeffs.fine_a0, h, j);
        let d1 = stencil_derivative(&coeffs.fine_a1, h, j);
        let d2 = stencil_derivative(&coeffs.fine_a2, h, j);
        let (a1, a2) = (coeffs.fine_a1[j], coeffs.fine_a2[j]);
        for b in 0..nx {
            let x = x_lo + (x_hi - x_lo) * b as f64 / (nx - 1).max(1) as f64;
            let u_t = d0 + d1 * x + d2 * x * x;
            let u_x = a1 + 2.0 * a2 * x;
            let r = -u_t + (price(t) + u_x).powi(2) / (2.0 * cost.c) - cost.potential(x);
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// `v*(t_k, x) = −(ϖ(t_k) + a1(t_k) + 2 a2(t_k) x) / c`.
pub fn lq_feedback(
    cost: &CostSpec,
    coeffs: &LqCoefficients,
    price: &[f64],
    k: usize,
    x: f64,
) -> Result<f64> {
    require_quadratic(cost)?;
    let steps = coeffs.grid.steps();
    if k > steps || k >= price.len() {
        return Err(Error::NodeOutOfRange { k, steps });
    }
    Ok(-(price[k] + coeffs.a1[k] + 2.0 * coeffs.a2[k] * x) / cost.c)
}

/// Mean and standard deviation of the Gaussian density transported by the
/// linear feedback, on the nodes of `coeffs.grid`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianPath {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// RK4 for `mean' = Q`, `std' = −(2 a2 / c) std` with step `2h` on the
/// integration grid so that midpoints fall on stored coefficient values.
pub fn lq_density(
    cost: &CostSpec,
    dist: &InitialDist,
    coeffs: &LqCoefficients,
    supply: &SupplySpec,
) -> Result<GaussianPath> {
    require_quadratic(cost)?;
    let fine = &coeffs.fine_grid;
    let h2 = 2.0 * fine.dt();
    let refine = coeffs.refine;
    let (mut mean, mut std) = (dist.mean, dist.std);
    let mut means = vec![mean];
    let mut stds = vec![std];
    let rate = |j: usize| -2.0 * coeffs.fine_a2[j] / cost.c;
    let mut fine_means = vec![mean];
    let mut fine_stds = vec![std];
    let mut j = 0;
    while j + 2 <= fine.steps() {
        let (t0, tm, t1) = (fine.t(j), fine.t(j + 1), fine.t(j + 2));
        let (q0, qm, q1) = (supply.value(t0), supply.value(tm), supply.value(t1));
        mean += h2 / 6.0 * (q0 + 4.0 * qm + q1);
        let (r0, rm, r1) = (rate(j), rate(j + 1), rate(j + 2));
        let k1 = r0 * std;
        let k2 = rm * (std + 0.5 * h2 * k1);
        let k3 = rm * (std + 0.5 * h2 * k2);
        let k4 = r1 * (std + h2 * k3);
        std += h2 / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        fine_means.push(mean);
        fine_stds.push(std);
        j += 2;
    }
    if refine % 2 != 0 {
        return Err(Error::InvalidParameter {
            field: "refine",
            reason: format!("density integration needs an even refinement, got {refine}"),
        });
    }
    let stride = refine / 2;
    for k in 1..=coeffs.grid.steps() {
        means.push(fine_means[k * stride]);
        stds.push(fine_stds[k * stride]);
    }
    Ok(GaussianPath {
        mean: means,
        std: stds,
    })
}

/// Euler trajectories under the closed-form feedback, with the price built
/// from the sample mean of `x0`. Controls include node `M`.
pub fn lq_optimal_batch(
    cost: &CostSpec,
    supply: &SupplySpec,
    grid: &TimeGrid,
    x0: &[f64],
    refine: usize,
) -> Result<(TrajectoryBatch, LqCoefficients)> {
    if x0.is_empty() {
        return Err(Error::Batch("no agents".into()));
    }
    let mbar = x0.iter().sum::<f64>() / x0.len() as f64;
    let price_fn = LqPrice::new(cost, supply, grid.horizon(), mbar)?;
    let price = price_fn.sample(grid);
    let coeffs = lq_coefficients(cost, &|t| price_fn.eval(t), grid, refine)?;
    let dt = grid.dt();
    let m = grid.steps();
    let mut states = Vec::with_capacity(x0.len());
    let mut controls = Vec::with_capacity(x0.len());
    for &start in x0 {
        let mut xs = Vec::with_capacity(m + 1);
        let mut vs = Vec::with_capacity(m + 1);
        let mut x = start;
        for k in 0..=m {
            let v = lq_feedback(cost, &coeffs, &price, k, x)?;
            xs.push(x);
            vs.push(v);
            x += dt * v;
        }
        states.push(xs);
        controls.push(vs);
    }
    let batch = TrajectoryBatch {
        grid: *grid,
        states,
        controls,
        price,
        supply: supply.sample(grid),
    };
    Ok((batch, coeffs))
}
