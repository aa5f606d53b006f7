//! Discrete Euler-Lagrange residuals of a trajectory batch and their
//! aggregate, an upper bound (up to a constant) on the squared L² price
//! error.

use serde::Serialize;

use crate::error::Result;
use crate::model::CostSpec;
use crate::rollout::TrajectoryBatch;

/// Squared discrete norms. `eps_run` and `eps_q` are `Δt`-weighted sums;
/// `eps_t` is a plain sum over agents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ResidualNorms {
    pub eps_run: f64,
    pub eps_t: f64,
    pub eps_q: f64,
}

impl ResidualNorms {
    pub fn sum(&self) -> f64 {
        self.eps_run + self.eps_t + self.eps_q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    /// `ε^{(i)⟨k⟩}` for `k = 1..M−1`, stored at offset `k − 1`.
    pub eps_run: Vec<Vec<f64>>,
    /// `ε^{(i)⟨0⟩}`, logged but not aggregated.
    pub eps_run_initial: Vec<f64>,
    pub eps_t: Vec<f64>,
    /// `ε_q^{⟨k⟩}` for `k = 1..M−1`, stored at offset `k − 1`.
    pub eps_q: Vec<f64>,
    pub eps_q_initial: f64,
    pub norms: ResidualNorms,
    pub estimate: f64,
}

/// `P^{(i)⟨k⟩} = −(L_v(X, v) + ϖ)` at every node, indexed `[agent][k]`.
pub fn adjoint_states(batch: &TrajectoryBatch, cost: &CostSpec) -> Vec<Vec<f64>> {
    batch
        .states
        .iter()
        .zip(&batch.controls)
        .map(|(xs, vs)| {
            xs.iter()
                .zip(vs)
                .zip(&batch.price)
                .map(|((&x, &v), &w)| -(cost.lagrangian_grads(x, v).1 + w))
                .collect()
        })
        .collect()
}

pub fn residuals(batch: &TrajectoryBatch, cost: &CostSpec) -> Result<ResidualReport> {
    batch.validate()?;
    let m = batch.grid.steps();
    let dt = batch.grid.dt();
    let n = batch.n_agents() as f64;
    let p = adjoint_states(batch, cost);

    let running = |xs: &[f64], ps: &[f64], k: usize| -> Result<f64> {
        let (hx, _) = cost.hamiltonian_grads(xs[k], ps[k] + batch.price[k])?;
        Ok((ps[k + 1] - ps[k]) / dt - hx)
    };
    let mut eps_run = Vec::with_capacity(batch.n_agents());
    let mut eps_run_initial = Vec::with_capacity(batch.n_agents());
    let mut eps_t = Vec::with_capacity(batch.n_agents());
    for (xs, ps) in batch.states.iter().zip(&p) {
        eps_run_initial.push(running(xs, ps, 0)?);
        eps_run.push((1..m).map(|k| running(xs, ps, k)).collect::<Result<Vec<_>>>()?);
        eps_t.push(cost.terminal(xs[m]).1 - ps[m]);
    }

    let balance = |k: usize| -> Result<f64> {
        let mut acc = 0.0;
        for (xs, ps) in batch.states.iter().zip(&p) {
            let (_, hp) = cost.hamiltonian_grads(xs[k], ps[k] + batch.price[k])?;
            acc -= hp;
        }
        Ok(acc / n - batch.supply[k])
    };
    let eps_q_initial = balance(0)?;
    let eps_q = (1..m).map(balance).collect::<Result<Vec<_>>>()?;

    let norms = ResidualNorms {
        eps_run: dt * eps_run.iter().flatten().map(|e| e * e).sum::<f64>(),
        eps_t: eps_t.iter().map(|e| e * e).sum(),
        eps_q: dt * eps_q.iter().map(|e| e * e).sum::<f64>(),
    };
    Ok(ResidualReport {
        eps_run,
        eps_run_initial,
        eps_t,
        eps_q,
        eps_q_initial,
        estimate: norms.sum(),
        norms,
    })
}

/// The aggregate `‖ε‖² + |ε_T|² + ‖ε_q‖²`.
pub fn posterior_estimate(report: &ResidualReport) -> f64 {
    report.norms.sum()
}
