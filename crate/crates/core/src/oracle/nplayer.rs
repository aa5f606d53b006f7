//! Finite-population benchmark: dual ascent on the price with exact
//! per-player best responses.
//!
//! For a price path `ϖ`, player `i` solves the discrete Hamiltonian system
//!
//! ```text
//! X_{k+1} = X_k + Δt v_k,                 k < M
//! P_k     = −(ℓ'(v_k) + ϖ_k),             k ≤ M
//! P_M     = u_T'(X_M)
//! P_k     = P_{k+1} + Δt V'(X_k),         k < M
//! ```
//!
//! which is the system whose residuals the estimator measures, so a
//! converged solution certifies itself. Eliminating `P` leaves
//! `F_k(v) = ℓ'(v_k) + ϖ_k + u_T'(X_M) + Δt Σ_{l≥k} V'(X_l) = 0` for
//! `k < M`, solved by Newton with an O(M) elimination sweep. The control at
//! node `M` follows from `ℓ'(v_M) = −(ϖ_M + u_T'(X_M))`, and `ϖ_M` is chosen
//! so that the market clears at `t_M` exactly. The remaining prices are
//! updated by `ϖ_k += ρ (mean_i v_k^i − Q_k)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CostSpec, SupplySpec, TimeGrid};
use crate::rollout::TrajectoryBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NPlayerOptions {
    /// Target L∞ balance residual.
    pub tol: f64,
    /// Dual step; `None` means `0.5 c`.
    pub rho: Option<f64>,
    /// Revert and halve `ρ` whenever the balance residual grows.
    pub step_halving: bool,
    pub max_outer: usize,
    /// L∞ tolerance on the best-response system.
    pub newton_tol: f64,
    pub newton_max: usize,
}

impl Default for NPlayerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            rho: None,
            step_halving: true,
            max_outer: 200_000,
            newton_tol: 1e-10,
            newton_max: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NPlayerSolution {
    pub grid: TimeGrid,
    pub price: Vec<f64>,
    pub supply: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// L∞ over nodes of `mean_i v_k^i − Q_k`.
    pub balance_residual: f64,
    pub iterations: usize,
    pub rho: f64,
    /// Balance residual after every outer iteration (entry 0 is the start).
    pub history: Vec<f64>,
    pub certified: bool,
}

impl NPlayerSolution {
    pub fn to_batch(&self) -> TrajectoryBatch {
        TrajectoryBatch {
            grid: self.grid,
            states: self.states.clone(),
            controls: self.controls.clone(),
            price: self.price.clone(),
            supply: self.supply.clone(),
        }
    }
}

struct Player {
    x0: f64,
    /// `v_0 .. v_{M−1}`.
    v: Vec<f64>,
}

struct Workspace {
    x: Vec<f64>,
    f: Vec<f64>,
    s: Vec<f64>,
    g: Vec<f64>,
    dv: Vec<f64>,
    trial: Vec<f64>,
}

impl Workspace {
    fn new(m: usize) -> Self {
        Self {
            x: vec![0.0; m + 1],
            f: vec![0.0; m],
            s: vec![0.0; m + 1],
            g: vec![0.0; m + 1],
            dv: vec![0.0; m],
            trial: vec![0.0; m],
        }
    }
}

fn states_into(x0: f64, v: &[f64], dt: f64, x: &mut [f64]) {
    x[0] = x0;
    for k in 0..v.len() {
        x[k + 1] = x[k] + dt * v[k];
    }
}

// F_k for k < M; returns max |F_k|
fn residual_into(cost: &CostSpec, price: &[f64], dt: f64, v: &[f64], x: &[f64], f: &mut [f64]) -> f64 {
    let m = v.len();
    let mut tail = cost.terminal(x[m]).1;
    let mut worst = 0.0f64;
    for k in (0..m).rev() {
        tail += dt * cost.potential_prime(x[k]);
        f[k] = cost.control_cost_prime(v[k]) + price[k] + tail;
        worst = worst.max(f[k].abs());
    }
    worst
}

fn sum_sq(f: &[f64]) -> f64 {
    f.iter().map(|v| v * v).sum()
}

/// Solves `F'(v) δv = −F` into `ws.dv`, with `F` read from `ws.f`.
fn newton_direction(cost: &CostSpec, dt: f64, v: &[f64], ws: &mut Workspace) {
    let m = v.len();
    let v2 = cost.eta; // V'' is constant
    // backward elimination of G_k = s_k δX_k + g_k
    ws.s[m] = cost.gamma;
    ws.g[m] = 0.0;
    for k in (0..m).rev() {
        let l2 = cost.control_cost_second(v[k]);
        let a = l2 + ws.s[k + 1] * dt;
        let b = ws.s[k + 1] + dt * v2;
        ws.s[k] = b * l2 / a;
        ws.g[k] = (ws.g[k + 1] * l2 - ws.s[k + 1] * dt * ws.f[k]) / a;
    }
    let mut dx = 0.0;
    for k in 0..m {
        let l2 = cost.control_cost_second(v[k]);
        let a = l2 + ws.s[k + 1] * dt;
        let b = ws.s[k + 1] + dt * v2;
        ws.dv[k] = -(ws.f[k] + ws.g[k + 1] + b * dx) / a;
        dx += dt * ws.dv[k];
    }
}

/// Newton on `F(v) = 0` for one player; `v` is updated in place.
fn best_response(
    cost: &CostSpec,
    price: &[f64],
    dt: f64,
    x0: f64,
    v: &mut [f64],
    ws: &mut Workspace,
    opts: &NPlayerOptions,
) -> Result<()> {
    let m = v.len();
    states_into(x0, v, dt, &mut ws.x);
    let mut norm = residual_into(cost, price, dt, v, &ws.x, &mut ws.f);
    for _ in 0..opts.newton_max {
        if norm <= opts.newton_tol {
            return Ok(());
        }
        newton_direction(cost, dt, v, ws);
        // backtracking on ½‖F‖²
        let phi0 = sum_sq(&ws.f);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for k in 0..m {
                ws.trial[k] = v[k] + alpha * ws.dv[k];
            }
            states_into(x0, &ws.trial, dt, &mut ws.x);
            let n = residual_into(cost, price, dt, &ws.trial, &ws.x, &mut ws.f);
            if sum_sq(&ws.f) <= (1.0 - 1e-4 * alpha) * phi0 || n <= opts.newton_tol {
                v.copy_from_slice(&ws.trial);
                norm = n;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no decrease possible at this precision
            states_into(x0, v, dt, &mut ws.x);
            norm = residual_into(cost, price, dt, v, &ws.x, &mut ws.f);
            break;
        }
    }
    if norm <= opts.newton_tol.max(1e3 * f64::EPSILON * (1.0 + price.iter().fold(0.0f64, |a, p| a.max(p.abs())))) {
        Ok(())
    } else if norm.is_finite() {
        Err(Error::NonConvergence {
            p: price[0],
            residual: norm,
        })
    } else {
        Err(Error::NonFinite("best response"))
    }
}

/// Terminal price making `mean_i v†(ϖ_M + u_T'(X_M^i)) = Q_M`.
fn clearing_terminal_price(cost: &CostSpec, terminal_slopes: &[f64], q: f64) -> Result<f64> {
    let n = terminal_slopes.len() as f64;
    let mean_slope = terminal_slopes.iter().sum::<f64>() / n;
    // exact for the quadratic cost, a starting point otherwise
    let mut w = -cost.c * q - mean_slope;
    let excess = |w: f64| -> Result<(f64, f64)> {
        let mut mean_v = 0.0;
        let mut slope = 0.0;
        for &b in terminal_slopes {
            let v = cost.optimal_control(w + b)?;
            mean_v += v;
            slope -= 1.0 / cost.control_cost_second(v);
        }
        Ok((mean_v / n - q, slope / n))
    };
    let (mut r, mut d) = excess(w)?;
    // excess is strictly decreasing in w; bracket then Newton with bisection
    let (mut lo, mut hi) = (w, w);
    let mut step = 1.0;
    while excess(lo)?.0 < 0.0 {
        lo -= step;
        step *= 2.0;
    }
    step = 1.0;
    while excess(hi)?.0 > 0.0 {
        hi += step;
        step *= 2.0;
    }
    for _ in 0..200 {
        if r.abs() <= 1e-14 * (1.0 + q.abs()) || hi - lo <= 4.0 * f64::EPSILON * w.abs().max(1.0) {
            return Ok(w);
        }
        if r > 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        let mut next = w - r / d;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        w = next;
        (r, d) = excess(w)?;
    }
    Ok(w)
}

/// Dual ascent for the N-player equilibrium price.
pub fn nplayer_solve(
    cost: &CostSpec,
    x0: &[f64],
    supply: &SupplySpec,
    grid: &TimeGrid,
    opts: &NPlayerOptions,
) -> Result<NPlayerSolution> {
    nplayer_solve_sampled(cost, x0, &supply.sample(grid), grid, opts)
}

/// As [`nplayer_solve`] with the supply given at every node.
pub fn nplayer_solve_sampled(
    cost: &CostSpec,
    x0: &[f64],
    q: &[f64],
    grid: &TimeGrid,
    opts: &NPlayerOptions,
) -> Result<NPlayerSolution> {
    cost.validate()?;
    if q.len() != grid.steps() + 1 {
        return Err(Error::ShapeMismatch {
            context: "supply samples",
            expected: format!("{} nodes", grid.steps() + 1),
            got: format!("{} nodes", q.len()),
        });
    }
    let q = q.to_vec();
    if x0.is_empty() {
        return Err(Error::Batch("the N-player game needs at least one player".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter {
            field: "tol",
            reason: format!("must be > 0, got {}", opts.tol),
        });
    }
    let m = grid.steps();
    let dt = grid.dt();
    let n = x0.len() as f64;
    let mut rho = opts.rho.unwrap_or(0.5 * cost.c);
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter {
            field: "rho",
            reason: format!("must be > 0, got {rho}"),
        });
    }

    let mut ws = Workspace::new(m);
    let mut players: Vec<Player> = x0
        .iter()
        .map(|&x| Player {
            x0: x,
            v: q[..m].to_vec(),
        })
        .collect();
    let mut price = vec![0.0; m + 1];

    // best responses and the excess demand `mean v_k − Q_k`, k < M
    let respond = |players: &mut [Player], price: &[f64], ws: &mut Workspace| -> Result<(Vec<f64>, f64)> {
        let mut excess = vec![0.0; m];
        for p in players.iter_mut() {
            best_response(cost, price, dt, p.x0, &mut p.v, ws, opts)?;
            for k in 0..m {
                excess[k] += p.v[k];
            }
        }
        let mut worst = 0.0f64;
        for k in 0..m {
            excess[k] = excess[k] / n - q[k];
            worst = worst.max(excess[k].abs());
        }
        Ok((excess, worst))
    };

    let (mut excess, mut residual) = respond(&mut players, &price, &mut ws)?;
    let mut history = vec![residual];
    let mut iterations = 0;
    let mut saved_v: Vec<Vec<f64>> = Vec::new();
    while residual > opts.tol && iterations < opts.max_outer {
        iterations += 1;
        let old_price = price.clone();
        if opts.step_halving {
            saved_v = players.iter().map(|p| p.v.clone()).collect();
        }
        for k in 0..m {
            price[k] += rho * excess[k];
        }
        let (e, r) = respond(&mut players, &price, &mut ws)?;
        if opts.step_halving && r > residual {
            price = old_price;
            for (p, v) in players.iter_mut().zip(&saved_v) {
                p.v.clone_from(v);
            }
            rho *= 0.5;
            history.push(residual);
            if rho < 1e-12 * cost.c {
                break;
            }
            continue;
        }
        excess = e;
        residual = r;
        history.push(residual);
    }

    // terminal node: clear the market exactly
    let mut states = Vec::with_capacity(players.len());
    let mut slopes = Vec::with_capacity(players.len());
    for p in &players {
        let mut x = vec![0.0; m + 1];
        states_into(p.x0, &p.v, dt, &mut x);
        slopes.push(cost.terminal(x[m]).1);
        states.push(x);
    }
    price[m] = clearing_terminal_price(cost, &slopes, q[m])?;
    let mut controls = Vec::with_capacity(players.len());
    let mut mean_vm = 0.0;
    for (p, &b) in players.iter().zip(&slopes) {
        let mut v = p.v.clone();
        let vm = cost.optimal_control(price[m] + b)?;
        mean_vm += vm;
        v.push(vm);
        controls.push(v);
    }
    let balance_residual = residual.max((mean_vm / n - q[m]).abs());
    let certified = balance_residual <= opts.tol;
    let solution = NPlayerSolution {
        grid: *grid,
        price,
        supply: q,
        states,
        controls,
        balance_residual,
        iterations,
        rho,
        history,
        certified,
    };
    if certified {
        Ok(solution)
    } else {
        Err(Error::MaxIterations {
            iterations,
            residual: balance_residual,
            best: Box::new(solution),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostKind, SupplyKind};

    fn dense_jacobian_check(cost: &CostSpec) {
        let g = TimeGrid::new(1.0, 6).unwrap();
        let dt = g.dt();
        let m = 6;
        let price: Vec<f64> = (0..=m).map(|k| 0.3 - 0.1 * k as f64).collect();
        let v: Vec<f64> = (0..m).map(|k| 0.2 * (k as f64).sin()).collect();
        let x0 = 0.4;
        let eval = |v: &[f64]| {
            let mut x = vec![0.0; m + 1];
            let mut f = vec![0.0; m];
            states_into(x0, v, dt, &mut x);
            residual_into(cost, &price, dt, v, &x, &mut f);
            f
        };
        let h = 1e-6;
        let mut jac = nalgebra::DMatrix::zeros(m, m);
        for j in 0..m {
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[j] += h;
            vm[j] -= h;
            let (fp, fm) = (eval(&vp), eval(&vm));
            for i in 0..m {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let f0 = eval(&v);
        let dense = jac.lu().solve(&-nalgebra::DVector::from_vec(f0.clone())).unwrap();
        let mut ws = Workspace::new(m);
        ws.f.copy_from_slice(&f0);
        newton_direction(cost, dt, &v, &mut ws);
        for k in 0..m {
            assert!((ws.dv[k] - dense[k]).abs() < 1e-7 * (1.0 + dense[k].abs()), "{k}");
        }
    }

    #[test]
    fn sweep_matches_dense_newton_quadratic() {
        dense_jacobian_check(&CostSpec::reference(CostKind::Quadratic));
    }

    #[test]
    fn sweep_matches_dense_newton_quartic() {
        dense_jacobian_check(&CostSpec::reference(CostKind::QuarticPerturbed));
    }

    #[test]
    fn symmetric_rest_point() {
        // κ = ζ = x0 and Q ≡ 0: nobody trades
        let cost = CostSpec::new(CostKind::Quadratic, 1.0, 0.5, 1.0, 1.0, 0.5).unwrap();
        let g = TimeGrid::new(1.0, 20).unwrap();
        let sol = nplayer_solve_sampled(&cost, &[0.5], &[0.0; 21], &g, &Default::default()).unwrap();
        assert!(sol.controls[0].iter().all(|v| v.abs() <= 1e-8));
        assert!(sol.price.iter().all(|w| w.abs() <= 1e-8));
    }

    #[test]
    fn single_player_trades_the_supply() {
        let cost = CostSpec::reference(CostKind::Quadratic);
        let supply = SupplySpec::new(SupplyKind::ConstantMean, 0.1);
        let g = TimeGrid::new(1.0, 30).unwrap();
        let sol = nplayer_solve(&cost, &[-0.25], &supply, &g, &NPlayerOptions::default()).unwrap();
        for k in 0..=30 {
            assert!((sol.controls[0][k] - sol.supply[k]).abs() <= 1e-8);
        }
    }

    #[test]
    fn quartic_converges() {
        let cost = CostSpec::reference(CostKind::QuarticPerturbed);
        let supply = SupplySpec::new(SupplyKind::OscillatingMean, 0.0);
        let g = TimeGrid::new(1.0, 30).unwrap();
        let x0 = [-0.6, -0.25, 0.1, 0.3];
        let sol = nplayer_solve(&cost, &x0, &supply, &g, &NPlayerOptions::default()).unwrap();
        assert!(sol.certified);
        assert!(sol.balance_residual <= 1e-8);
    }

    #[test]
    fn empty_population_rejected() {
        let cost = CostSpec::reference(CostKind::Quadratic);
        let supply = SupplySpec::new(SupplyKind::ConstantMean, 0.1);
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert!(nplayer_solve(&cost, &[], &supply, &g, &Default::default()).is_err());
    }

    #[test]
    fn iteration_cap_returns_best_iterate() {
        let cost = CostSpec::reference(CostKind::Quadratic);
        let supply = SupplySpec::new(SupplyKind::ConstantMean, 0.1);
        let g = TimeGrid::new(1.0, 10).unwrap();
        let opts = NPlayerOptions {
            max_outer: 2,
            tol: 1e-14,
            ..Default::default()
        };
        match nplayer_solve(&cost, &[0.0, 0.5], &supply, &g, &opts) {
            Err(Error::MaxIterations { iterations, best, .. }) => {
                assert_eq!(iterations, 2);
                assert!(!best.certified);
            }
            other => panic!("expected MaxIterations, got {other:?}"),
        }
    }
}
