//! Helpers shared by the integration tests.
#![allow(dead_code)]

use mfgprice::model::{SupplyKind, SupplySpec, TimeGrid};
use mfgprice::nn::{
    init_params, layer_bias, layer_weight, Arch, ParamSet, Tape, HIDDEN_B2, HIDDEN_W1, HIDDEN_W2,
};
use mfgprice::rollout::{rollout, ArchKind, RolloutOptions, TrajectoryBatch};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
/// Gradients below this size are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

fn setting() -> (TimeGrid, SupplySpec, Vec<f64>) {
    (
        TimeGrid::new(1.0, 3).unwrap(),
        SupplySpec::new(SupplyKind::OscillatingMean, 0.3),
        vec![-0.6, -0.1, 0.4],
    )
}

/// Sum of squared controls and prices over a 3-step rollout, with the
/// gradient for the tracked network (0 = control, 1 = price).
fn rollout_loss(kind: ArchKind, pv: &ParamSet, pw: &ParamSet, which: Option<usize>) -> (f64, Vec<DMatrix<f64>>) {
    let (grid, supply, x0) = setting();
    let mut tape = Tape::new();
    let rv = tape.bind(pv, which == Some(0));
    let rw = tape.bind(pw, which == Some(1));
    let r = rollout(kind, &mut tape, rv, rw, &x0, &grid, &supply, &RolloutOptions::default()).unwrap();
    let mut acc = None;
    for &n in r.nodes.controls.iter().chain(&r.nodes.price) {
        let sq = tape.powi(n, 2);
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s).unwrap(),
            None => s,
        });
    }
    let loss = acc.unwrap();
    let value = tape.scalar(loss);
    match which {
        Some(i) => (value, tape.backward(loss).unwrap().swap_remove(i)),
        None => (value, Vec::new()),
    }
}

/// Row-major flat index, matching `ParamSet::get_flat`.
fn flat(grads: &[DMatrix<f64>], mut idx: usize) -> f64 {
    for g in grads {
        if idx < g.len() {
            return g[(idx / g.ncols(), idx % g.ncols())];
        }
        idx -= g.len();
    }
    panic!("index out of range")
}

/// Worst relative error of reverse-mode against central differences over
/// `coords` random coordinates of the control (0) or price (1) network.
pub fn gradient_check(kind: ArchKind, which: usize, coords: usize, seed: u64) -> f64 {
    let pv = init_params(kind.control(), seed);
    let mut pw = init_params(kind.price(), seed + 1);
    // nonzero biases so that every coordinate class is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut pv = pv;
    for p in [&mut pv, &mut pw] {
        for t in p.tensors.iter_mut().filter(|t| t.ncols() == 1) {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let (_, grads) = rollout_loss(kind, &pv, &pw, Some(which));
    let total = if which == 0 { pv.num_scalars() } else { pw.num_scalars() };
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let idx = rng.random_range(0..total);
        let eval = |delta: f64| {
            let (mut v, mut w) = (pv.clone(), pw.clone());
            let target = if which == 0 { &mut v } else { &mut w };
            target.set_flat(idx, target.get_flat(idx) + delta);
            rollout_loss(kind, &v, &w, None).0
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let g = flat(&grads, idx);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// RNN parameters with the recurrent weights zeroed, so `a ≡ σ(beta)`.
pub fn decoupled_rnn(arch: Arch, seed: u64, beta: f64) -> ParamSet {
    let mut p = init_params(arch, seed);
    p.tensors[HIDDEN_W1].fill(0.0);
    p.tensors[HIDDEN_W2].fill(0.0);
    p.tensors[HIDDEN_B2][(0, 0)] = beta;
    p
}

/// The MLP that takes `(t, X, ϖ)` or `(t, Q)` and equals `rnn` with its
/// constant `a` input folded into the first bias. The price MLP ignores `Q`.
pub fn absorb_constant_input(rnn: &ParamSet) -> ParamSet {
    let a = sigmoid(rnn.tensors[HIDDEN_B2][(0, 0)]);
    let (arch, keep) = match rnn.arch {
        Arch::RnnControl => (Arch::MlpControl, 3),
        Arch::RnnPrice => (Arch::MlpPrice, 1),
        other => panic!("not recurrent: {other:?}"),
    };
    let w1 = &rnn.tensors[layer_weight(0)];
    let last = w1.ncols() - 1;
    let mut w = DMatrix::zeros(w1.nrows(), arch.input_width());
    for c in 0..keep {
        w.set_column(c, &w1.column(c));
    }
    let mut b = rnn.tensors[layer_bias(0)].clone();
    for r in 0..b.nrows() {
        b[(r, 0)] += w1[(r, last)] * a;
    }
    let mut tensors = vec![w, b];
    tensors.extend(rnn.tensors[2..6].iter().cloned());
    ParamSet {
        arch,
        seed: rnn.seed,
        tensors,
    }
}

pub fn run(kind: ArchKind, v: &ParamSet, w: &ParamSet, x0: &[f64], grid: &TimeGrid, supply: &SupplySpec) -> TrajectoryBatch {
    let mut tape = Tape::new();
    let pv = tape.bind(v, false);
    let pw = tape.bind(w, false);
    rollout(kind, &mut tape, pv, pw, x0, grid, supply, &RolloutOptions::default())
        .unwrap()
        .batch
}

/// Largest absolute difference between two batches over states, controls and price.
pub fn batch_gap(a: &TrajectoryBatch, b: &TrajectoryBatch) -> f64 {
    let series = |x: &TrajectoryBatch| -> Vec<f64> {
        x.states
            .iter()
            .chain(&x.controls)
            .flatten()
            .chain(&x.price)
            .copied()
            .collect()
    };
    series(a)
        .iter()
        .zip(series(b).iter())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

/// Max gap between an RNN rollout with decoupled recurrence and the
/// equivalent MLP rollout.
pub fn rnn_reduction_gap(seed: u64, grid: &TimeGrid, supply: &SupplySpec, x0: &[f64]) -> f64 {
    let rv = decoupled_rnn(Arch::RnnControl, seed, 0.7);
    let rw = decoupled_rnn(Arch::RnnPrice, seed + 1, -0.4);
    let mv = absorb_constant_input(&rv);
    let mw = absorb_constant_input(&rw);
    let rnn = run(ArchKind::Rnn, &rv, &rw, x0, grid, supply);
    let mlp = run(ArchKind::Mlp, &mv, &mw, x0, grid, supply);
    batch_gap(&rnn, &mlp)
}
