//! Rollout properties: recurrent reduction, hidden-state contraction and a
//! hand-rolled reference chain.

mod common;

use common::{rnn_reduction_gap, sigmoid};
use mfgprice::model::{SupplyKind, SupplySpec, TimeGrid};
use mfgprice::nn::{
    init_params, layer_bias, layer_weight, rnn_cell_forward, Arch, ParamSet, Tape, HIDDEN_B1,
    HIDDEN_B2, HIDDEN_W1, HIDDEN_W2, HIDDEN_WIDTH,
};
use mfgprice::rollout::ArchKind;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn decoupled_rnn_reproduces_augmented_mlp() {
    let grid = TimeGrid::new(1.0, 30).unwrap();
    for (supply, seed) in [
        (SupplySpec::new(SupplyKind::ConstantMean, 0.1), 1),
        (SupplySpec::new(SupplyKind::OscillatingMean, 0.0), 7),
    ] {
        let gap = rnn_reduction_gap(seed, &grid, &supply, &[-0.9, -0.25, 0.3, 1.2]);
        assert!(gap <= 1e-12, "gap {gap:e}");
    }
}

fn dense_forward(p: &ParamSet, input: &DVector<f64>) -> f64 {
    let layer = |j: usize, x: &DVector<f64>| &p.tensors[layer_weight(j)] * x + p.tensors[layer_bias(j)].column(0);
    let a1 = layer(0, input).map(sigmoid);
    let a2 = layer(1, &a1).map(sigmoid);
    layer(2, &a2)[0]
}

/// One hidden-state update and the resulting scalar `a`.
fn dense_hidden(p: &ParamSet, q: f64, h: &DVector<f64>) -> (DVector<f64>, f64) {
    let mut y = DVector::zeros(HIDDEN_WIDTH + 1);
    y[0] = q;
    y.rows_mut(1, HIDDEN_WIDTH).copy_from(h);
    let h_next = (&p.tensors[HIDDEN_W1] * y + p.tensors[HIDDEN_B1].column(0)).map(sigmoid);
    let a = sigmoid((&p.tensors[HIDDEN_W2] * &h_next)[0] + p.tensors[HIDDEN_B2][(0, 0)]);
    (h_next, a)
}

#[test]
fn rnn_rollout_matches_hand_rolled_two_step_chain() {
    let grid = TimeGrid::new(1.0, 2).unwrap();
    let supply = SupplySpec::new(SupplyKind::OscillatingMean, 0.2);
    let mut v = init_params(Arch::RnnControl, 21);
    let mut w = init_params(Arch::RnnPrice, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [&mut v, &mut w] {
        for t in p.tensors.iter_mut().filter(|t| t.ncols() == 1) {
            t.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        }
    }
    let x0 = 0.35;
    let batch = common::run(ArchKind::Rnn, &v, &w, &[x0], &grid, &supply);

    let q = supply.sample(&grid);
    let (mut hv, mut hw) = (DVector::zeros(HIDDEN_WIDTH), DVector::zeros(HIDDEN_WIDTH));
    let mut x = x0;
    for k in 0..=2 {
        let t = grid.t(k);
        let (hw_next, aw) = dense_hidden(&w, q[k], &hw);
        let price = dense_forward(&w, &DVector::from_vec(vec![t, aw]));
        let (hv_next, av) = dense_hidden(&v, q[k], &hv);
        let control = dense_forward(&v, &DVector::from_vec(vec![t, x, price, av]));
        let tol = 1e-15 * (1.0 + price.abs().max(control.abs()));
        assert!((batch.price[k] - price).abs() <= tol, "price at {k}");
        assert!((batch.controls[0][k] - control).abs() <= tol, "control at {k}");
        assert!((batch.states[0][k] - x).abs() <= 1e-15, "state at {k}");
        x += grid.dt() * control;
        hv = hv_next;
        hw = hw_next;
    }
}

/// Hidden states of an `RNN` cell driven by the constant supply `q`.
fn hidden_chain(p: &ParamSet, q: f64, steps: usize) -> Vec<DVector<f64>> {
    let mut tape = Tape::new();
    let r = tape.bind(p, false);
    let mut h = tape.input(DMatrix::zeros(HIDDEN_WIDTH, 1));
    let width = p.arch.input_width() - 1;
    let mut out = Vec::new();
    for _ in 0..steps {
        let qn = tape.constant(q);
        let rest = tape.input(DMatrix::from_element(width, 1, 0.1));
        let (_, h_next) = rnn_cell_forward(&mut tape, r, qn, h, rest).unwrap();
        out.push(DVector::from_column_slice(tape.value(h_next).as_slice()));
        h = h_next;
    }
    out
}

#[test]
fn hidden_chain_contracts_under_constant_supply() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..5 {
        let mut p = init_params(Arch::RnnControl, 100 + trial);
        let w1 = DMatrix::from_fn(HIDDEN_WIDTH, HIDDEN_WIDTH + 1, |_, _| rng.random_range(-1.0..1.0));
        let block_norm = w1.columns(1, HIDDEN_WIDTH).into_owned().singular_values().max();
        // scale so the recurrent block has spectral norm 3 < 4
        p.tensors[HIDDEN_W1] = w1 * (3.0 / block_norm);
        let lipschitz = 3.0 / 4.0;
        let hs = hidden_chain(&p, 0.8, 40);
        let steps: Vec<f64> = hs.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
        for pair in steps.windows(2) {
            assert!(pair[1] <= lipschitz * pair[0] + 1e-15, "trial {trial}: {pair:?}");
        }
        assert!(*steps.last().unwrap() < 1e-4);
    }
}

#[test]
fn hidden_states_and_activations_stay_in_unit_interval() {
    let p = init_params(Arch::RnnPrice, 4);
    for q in [-2.0, 0.0, 3.0] {
        for h in hidden_chain(&p, q, 10) {
            assert_eq!(h.len(), HIDDEN_WIDTH);
            assert!(h.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
