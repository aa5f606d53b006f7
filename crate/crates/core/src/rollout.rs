//! Forward-Euler trajectory generation driven by the control and price
//! networks.
//!
//! Agents are batched as columns: at node `k` the control network sees a
//! `width × N` input and produces `v^{⟨k⟩}` for every agent at once. The price
//! is shared by all agents. Controls are also evaluated at `k = M`; that
//! value never enters the dynamics or the loss and exists for the residual
//! estimator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SupplySpec, TimeGrid};
use crate::nn::{mlp_forward, rnn_cell_forward, Arch, Node, ParamRef, ParamSet, Tape, HIDDEN_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Rnn,
}

impl ArchKind {
    pub fn control(&self) -> Arch {
        match self {
            ArchKind::Mlp => Arch::MlpControl,
            ArchKind::Rnn => Arch::RnnControl,
        }
    }

    pub fn price(&self) -> Arch {
        match self {
            ArchKind::Mlp => Arch::MlpPrice,
            ArchKind::Rnn => Arch::RnnPrice,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    /// Feed `t / T` instead of `t` to the networks.
    pub scale_time: bool,
}

impl RolloutOptions {
    fn time(&self, grid: &TimeGrid, k: usize) -> f64 {
        let t = grid.t(k);
        if self.scale_time {
            t / grid.horizon()
        } else {
            t
        }
    }
}

/// States, controls, price and supply on every node. `states[i][k]` and
/// `controls[i][k]` are indexed by agent then node, `k = 0..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub price: Vec<f64>,
    pub supply: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nodes = self.grid.steps() + 1;
        if self.states.is_empty() {
            return Err(Error::Batch("no agents".into()));
        }
        if self.states.len() != self.controls.len() {
            return Err(Error::Batch("state/control agent counts differ".into()));
        }
        let rows_ok = self
            .states
            .iter()
            .chain(&self.controls)
            .all(|r| r.len() == nodes);
        if !rows_ok || self.price.len() != nodes || self.supply.len() != nodes {
            return Err(Error::Batch(format!("every series must have {nodes} nodes")));
        }
        Ok(())
    }

    /// Largest violation of `X^{k+1} = X^k + Δt v^k` over the batch.
    pub fn euler_defect(&self) -> f64 {
        let dt = self.grid.dt();
        let mut worst = 0.0f64;
        for (xs, vs) in self.states.iter().zip(&self.controls) {
            for k in 0..self.grid.steps() {
                worst = worst.max((xs[k + 1] - (xs[k] + dt * vs[k])).abs());
            }
        }
        worst
    }

    pub fn mean_control(&self, k: usize) -> f64 {
        self.controls.iter().map(|v| v[k]).sum::<f64>() / self.n_agents() as f64
    }
}

/// Tape nodes of a rollout: per node `k`, states and controls are `1 × N`,
/// the price is `1 × 1`.
#[derive(Debug, Clone)]
pub struct RolloutNodes {
    pub states: Vec<Node>,
    pub controls: Vec<Node>,
    pub price: Vec<Node>,
}

#[derive(Debug, Clone)]
pub struct TapedRollout {
    pub batch: TrajectoryBatch,
    pub nodes: RolloutNodes,
}

fn check_arch(tape: &Tape<'_>, p: ParamRef, want: Arch) -> Result<()> {
    let got = tape.params(p).arch;
    if got != want {
        return Err(Error::ShapeMismatch {
            context: "rollout architecture",
            expected: format!("{want:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

fn price_nodes_mlp(
    tape: &mut Tape<'_>,
    theta_w: ParamRef,
    grid: &TimeGrid,
    supply: &[f64],
    opts: &RolloutOptions,
) -> Result<Vec<Node>> {
    let nodes = grid.steps() + 1;
    let input = DMatrix::from_fn(2, nodes, |r, k| {
        if r == 0 {
            opts.time(grid, k)
        } else {
            supply[k]
        }
    });
    let input = tape.input(input);
    let all = mlp_forward(tape, theta_w, input)?;
    Ok((0..nodes).map(|k| tape.column(all, k)).collect())
}

fn price_nodes_rnn(
    tape: &mut Tape<'_>,
    theta_w: ParamRef,
    grid: &TimeGrid,
    supply: &[f64],
    opts: &RolloutOptions,
) -> Result<Vec<Node>> {
    let mut h = tape.input(DMatrix::zeros(HIDDEN_WIDTH, 1));
    let mut out = Vec::with_capacity(supply.len());
    for (k, &q) in supply.iter().enumerate() {
        let qn = tape.constant(q);
        let t = tape.constant(opts.time(grid, k));
        let (p, h_next) = rnn_cell_forward(tape, theta_w, qn, h, t)?;
        out.push(p);
        h = h_next;
    }
    Ok(out)
}

fn ensure_finite(tape: &Tape<'_>, n: Node, what: &'static str) -> Result<()> {
    if tape.value(n).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn collect_batch(
    tape: &Tape<'_>,
    grid: &TimeGrid,
    supply: Vec<f64>,
    nodes: RolloutNodes,
) -> TapedRollout {
    let n = tape.value(nodes.states[0]).ncols();
    let series = |ns: &[Node]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| ns.iter().map(|&node| tape.value(node)[(0, i)]).collect())
            .collect()
    };
    let batch = TrajectoryBatch {
        grid: *grid,
        states: series(&nodes.states),
        controls: series(&nodes.controls),
        price: nodes.price.iter().map(|&p| tape.scalar(p)).collect(),
        supply,
    };
    TapedRollout { batch, nodes }
}

/// Rollout with `MLP_ϖ(t_k, Q^k)` and `MLP_v(t_k, X^k, ϖ^k)`.
pub fn rollout_mlp(
    tape: &mut Tape<'_>,
    theta_v: ParamRef,
    theta_w: ParamRef,
    x0: &[f64],
    grid: &TimeGrid,
    supply: &SupplySpec,
    opts: &RolloutOptions,
) -> Result<TapedRollout> {
    check_arch(tape, theta_v, Arch::MlpControl)?;
    check_arch(tape, theta_w, Arch::MlpPrice)?;
    march(tape, theta_v, theta_w, x0, grid, supply, opts, false)
}

/// Rollout where both networks carry a hidden state fed the supply sequence.
pub fn rollout_rnn(
    tape: &mut Tape<'_>,
    theta_v: ParamRef,
    theta_w: ParamRef,
    x0: &[f64],
    grid: &TimeGrid,
    supply: &SupplySpec,
    opts: &RolloutOptions,
) -> Result<TapedRollout> {
    check_arch(tape, theta_v, Arch::RnnControl)?;
    check_arch(tape, theta_w, Arch::RnnPrice)?;
    march(tape, theta_v, theta_w, x0, grid, supply, opts, true)
}

pub fn rollout(
    kind: ArchKind,
    tape: &mut Tape<'_>,
    theta_v: ParamRef,
    theta_w: ParamRef,
    x0: &[f64],
    grid: &TimeGrid,
    supply: &SupplySpec,
    opts: &RolloutOptions,
) -> Result<TapedRollout> {
    match kind {
        ArchKind::Mlp => rollout_mlp(tape, theta_v, theta_w, x0, grid, supply, opts),
        ArchKind::Rnn => rollout_rnn(tape, theta_v, theta_w, x0, grid, supply, opts),
    }
}

#[allow(clippy::too_many_arguments)]
fn march(
    tape: &mut Tape<'_>,
    theta_v: ParamRef,
    theta_w: ParamRef,
    x0: &[f64],
    grid: &TimeGrid,
    supply: &SupplySpec,
    opts: &RolloutOptions,
    recurrent: bool,
) -> Result<TapedRollout> {
    if x0.is_empty() {
        return Err(Error::Batch("rollout needs at least one agent".into()));
    }
    let n = x0.len();
    let steps = grid.steps();
    let dt = grid.dt();
    let q = supply.sample(grid);
    let price = if recurrent {
        price_nodes_rnn(tape, theta_w, grid, &q, opts)?
    } else {
        price_nodes_mlp(tape, theta_w, grid, &q, opts)?
    };
    for &p in &price {
        ensure_finite(tape, p, "price")?;
    }

    let mut h = if recurrent {
        Some(tape.input(DMatrix::zeros(HIDDEN_WIDTH, 1)))
    } else {
        None
    };
    let mut x = tape.row(x0);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        states.push(x);
        let t = tape.row(&vec![opts.time(grid, k); n]);
        let w = tape.broadcast(price[k], n)?;
        let rest = tape.concat(&[t, x, w])?;
        let v = match h {
            Some(h_prev) => {
                let qn = tape.constant(q[k]);
                let (v, h_next) = rnn_cell_forward(tape, theta_v, qn, h_prev, rest)?;
                h = Some(h_next);
                v
            }
            None => mlp_forward(tape, theta_v, rest)?,
        };
        ensure_finite(tape, v, "control")?;
        controls.push(v);
        if k < steps {
            let step = tape.scale(v, dt);
            x = tape.add(x, step)?;
            ensure_finite(tape, x, "state")?;
        }
    }
    let nodes = RolloutNodes {
        states,
        controls,
        price,
    };
    Ok(collect_batch(tape, grid, q, nodes))
}

/// Price at every node, evaluated on a scratch tape.
pub fn price_curve(
    theta_w: &ParamSet,
    arch: Arch,
    grid: &TimeGrid,
    supply: &SupplySpec,
    opts: &RolloutOptions,
) -> Result<Vec<f64>> {
    if theta_w.arch != arch {
        return Err(Error::ShapeMismatch {
            context: "price curve",
            expected: format!("{arch:?}"),
            got: format!("{:?}", theta_w.arch),
        });
    }
    let mut tape = Tape::new();
    let pw = tape.bind(theta_w, false);
    let q = supply.sample(grid);
    let nodes = match arch {
        Arch::MlpPrice => price_nodes_mlp(&mut tape, pw, grid, &q, opts)?,
        Arch::RnnPrice => price_nodes_rnn(&mut tape, pw, grid, &q, opts)?,
        other => {
            return Err(Error::ShapeMismatch {
                context: "price curve",
                expected: "a price architecture".into(),
                got: format!("{other:?}"),
            })
        }
    };
    Ok(nodes.iter().map(|&n| tape.scalar(n)).collect())
}

/// Control network evaluated at every node `t_k` and every state in `xs`,
/// with the network's own price; returns `[k][j]`.
pub fn control_on_grid(
    kind: ArchKind,
    theta_v: &ParamSet,
    theta_w: &ParamSet,
    xs: &[f64],
    grid: &TimeGrid,
    supply: &SupplySpec,
    opts: &RolloutOptions,
) -> Result<Vec<Vec<f64>>> {
    // a rollout from `xs` evaluates the control at (t_k, X_k); freezing the
    // states is done by evaluating node by node with fresh inputs instead
    let mut tape = Tape::new();
    let pv = tape.bind(theta_v, false);
    let pw = tape.bind(theta_w, false);
    let q = supply.sample(grid);
    let price = match kind {
        ArchKind::Mlp => price_nodes_mlp(&mut tape, pw, grid, &q, opts)?,
        ArchKind::Rnn => price_nodes_rnn(&mut tape, pw, grid, &q, opts)?,
    };
    let n = xs.len();
    let mut h = match kind {
        ArchKind::Rnn => Some(tape.input(DMatrix::zeros(HIDDEN_WIDTH, 1))),
        ArchKind::Mlp => None,
    };
    let mut out = Vec::with_capacity(grid.steps() + 1);
    for k in 0..=grid.steps() {
        let t = tape.row(&vec![opts.time(grid, k); n]);
        let x = tape.row(xs);
        let w = tape.broadcast(price[k], n)?;
        let rest = tape.concat(&[t, x, w])?;
        let v = match h {
            Some(h_prev) => {
                let qn = tape.constant(q[k]);
                let (v, h_next) = rnn_cell_forward(&mut tape, pv, qn, h_prev, rest)?;
                h = Some(h_next);
                v
            }
            None => mlp_forward(&mut tape, pv, rest)?,
        };
        out.push(tape.value(v).iter().copied().collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SupplyKind;
    use crate::nn::init_params;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 5).unwrap()
    }

    fn supply() -> SupplySpec {
        SupplySpec::new(SupplyKind::OscillatingMean, 0.0)
    }

    #[test]
    fn zero_control_freezes_states() {
        let v = ParamSet::zeros(Arch::MlpControl);
        let w = init_params(Arch::MlpPrice, 3);
        let mut tape = Tape::new();
        let (pv, pw) = (tape.bind(&v, false), tape.bind(&w, false));
        let x0 = [0.3, -0.7];
        let r = rollout_mlp(&mut tape, pv, pw, &x0, &grid(), &supply(), &Default::default()).unwrap();
        for (i, xs) in r.batch.states.iter().enumerate() {
            assert!(xs.iter().all(|&x| x == x0[i]));
        }
    }

    #[test]
    fn constant_control_drifts_linearly() {
        let mut v = ParamSet::zeros(Arch::MlpControl);
        v.tensors[5][(0, 0)] = 0.5;
        let w = init_params(Arch::MlpPrice, 3);
        let mut tape = Tape::new();
        let (pv, pw) = (tape.bind(&v, false), tape.bind(&w, false));
        let g = TimeGrid::new(2.0, 8).unwrap();
        let r = rollout_mlp(&mut tape, pv, pw, &[1.0], &g, &supply(), &Default::default()).unwrap();
        assert!((r.batch.states[0][8] - (1.0 + 2.0 * 0.5)).abs() < 1e-14);
    }

    #[test]
    fn euler_chain_is_exact() {
        for kind in [ArchKind::Mlp, ArchKind::Rnn] {
            let v = init_params(kind.control(), 1);
            let w = init_params(kind.price(), 2);
            let mut tape = Tape::new();
            let (pv, pw) = (tape.bind(&v, false), tape.bind(&w, false));
            let x0 = [0.1, -0.4, 0.9];
            let r = rollout(kind, &mut tape, pv, pw, &x0, &grid(), &supply(), &Default::default())
                .unwrap();
            let b = &r.batch;
            b.validate().unwrap();
            let dt = b.grid.dt();
            for i in 0..3 {
                assert_eq!(b.states[i][0], x0[i]);
                let mut x = x0[i];
                for k in 0..5 {
                    x += dt * b.controls[i][k];
                    assert_eq!(b.states[i][k + 1], x);
                }
            }
            assert_eq!(b.euler_defect(), 0.0);
        }
    }

    #[test]
    fn price_curve_matches_rollout_and_ignores_agents() {
        let g = TimeGrid::new(1.0, 30).unwrap();
        for kind in [ArchKind::Mlp, ArchKind::Rnn] {
            let v = init_params(kind.control(), 1);
            let w = init_params(kind.price(), 2);
            let curve = price_curve(&w, kind.price(), &g, &supply(), &Default::default()).unwrap();
            assert_eq!(curve.len(), 31);
            for x0 in [vec![0.0], vec![1.0, 2.0, -3.0]] {
                let mut tape = Tape::new();
                let (pv, pw) = (tape.bind(&v, false), tape.bind(&w, false));
                let r = rollout(kind, &mut tape, pv, pw, &x0, &g, &supply(), &Default::default())
                    .unwrap();
                assert_eq!(r.batch.price, curve);
            }
        }
    }

    #[test]
    fn zero_price_network_gives_flat_curve() {
        let w = ParamSet::zeros(Arch::MlpPrice);
        let curve = price_curve(&w, Arch::MlpPrice, &grid(), &supply(), &Default::default()).unwrap();
        assert!(curve.iter().all(|&p| p == 0.0));
        assert!(price_curve(&w, Arch::RnnPrice, &grid(), &supply(), &Default::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut v = ParamSet::zeros(Arch::MlpControl);
        v.tensors[5][(0, 0)] = f64::MAX;
        let w = ParamSet::zeros(Arch::MlpPrice);
        let mut tape = Tape::new();
        let (pv, pw) = (tape.bind(&v, false), tape.bind(&w, false));
        let g = TimeGrid::new(10.0, 4).unwrap();
        let err = rollout_mlp(&mut tape, pv, pw, &[f64::MAX], &g, &supply(), &Default::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn control_grid_agrees_with_rollout_at_initial_node() {
        let v = init_params(Arch::MlpControl, 5);
        let w = init_params(Arch::MlpPrice, 6);
        let xs = [-1.0, 0.0, 1.0];
        let field =
            control_on_grid(ArchKind::Mlp, &v, &w, &xs, &grid(), &supply(), &Default::default())
                .unwrap();
        let mut tape = Tape::new();
        let (pv, pw) = (tape.bind(&v, false), tape.bind(&w, false));
        let r = rollout_mlp(&mut tape, pv, pw, &xs, &grid(), &supply(), &Default::default()).unwrap();
        for j in 0..3 {
            assert_eq!(field[0][j], r.batch.controls[j][0]);
        }
    }
}
