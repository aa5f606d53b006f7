//! Properties of the adversarial loss and of the alternating updates.

use mfgprice::model::{CostKind, CostSpec, InitialDist, SupplyKind, SupplySpec, TimeGrid};
use mfgprice::nn::{AdamConfig, AdamState, Direction, ParamSet};
use mfgprice::rollout::{ArchKind, RolloutOptions};
use mfgprice::training::{Seeds, TrainConfig, Trainer};
use nalgebra::DMatrix;

fn config(arch: ArchKind, kind: CostKind, supply: SupplySpec) -> TrainConfig {
    TrainConfig {
        arch,
        iterations: 10,
        sample_size: 6,
        epoch: 5,
        adam_v: AdamConfig::default(),
        adam_w: AdamConfig::default(),
        seeds: Seeds::from_base(42),
        grid: TimeGrid::new(1.0, 10).unwrap(),
        cost: CostSpec::reference(kind),
        supply,
        initial: InitialDist::new(-0.25, 0.4).unwrap(),
        rollout: RolloutOptions::default(),
    }
}

fn norm(g: &[DMatrix<f64>]) -> f64 {
    g.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt()
}

fn step(p: &ParamSet, g: &[DMatrix<f64>], lr: f64) -> ParamSet {
    let mut out = p.clone();
    for (t, d) in out.tensors.iter_mut().zip(g) {
        *t += d * lr;
    }
    out
}

const X0: [f64; 6] = [-0.9, -0.5, -0.2, 0.0, 0.3, 0.8];

#[test]
fn balanced_batch_has_zero_price_gradient() {
    // Q ≡ 1 and a constant control network v ≡ 1 clear the market exactly
    let supply = SupplySpec::new(SupplyKind::ConstantMean, 1.0);
    for (arch, kind) in [
        (ArchKind::Mlp, CostKind::Quadratic),
        (ArchKind::Rnn, CostKind::QuarticPerturbed),
    ] {
        let cfg = config(arch, kind, supply);
        let mut v = ParamSet::zeros(arch.control());
        v.tensors[5][(0, 0)] = 1.0;
        let w = mfgprice::nn::init_params(arch.price(), 9);
        let tr = Trainer::with_params(cfg, v, w).unwrap();
        let (batch, _) = tr.evaluate(&X0).unwrap();
        for k in 0..=10 {
            assert_eq!(batch.mean_control(k), batch.supply[k]);
        }
        let g = tr.price_gradient(&X0).unwrap();
        assert!(norm(&g) < 1e-10, "{arch:?}: {:e}", norm(&g));
    }
}

#[test]
fn ascending_price_parameters_increases_the_loss() {
    let supply = SupplySpec::new(SupplyKind::OscillatingMean, 0.0);
    for (arch, kind) in [
        (ArchKind::Mlp, CostKind::Quadratic),
        (ArchKind::Rnn, CostKind::Quadratic),
        (ArchKind::Mlp, CostKind::QuarticPerturbed),
    ] {
        let tr = Trainer::new(config(arch, kind, supply)).unwrap();
        let (batch, l0) = tr.evaluate(&X0).unwrap();
        let imbalance = (0..=10).map(|k| (batch.mean_control(k) - batch.supply[k]).abs()).fold(0.0, f64::max);
        assert!(imbalance > 1e-3);
        let g = tr.price_gradient(&X0).unwrap();
        let lr = 1e-6;
        let up = Trainer::with_params(tr.config.clone(), tr.theta_v.clone(), step(&tr.theta_w, &g, lr)).unwrap();
        let l1 = up.evaluate(&X0).unwrap().1;
        let predicted = lr * norm(&g).powi(2);
        assert!(l1 > l0, "{arch:?}/{kind:?}: {l0} -> {l1}");
        assert!((l1 - l0 - predicted).abs() < 0.05 * predicted, "first-order mismatch");
    }
}

#[test]
fn one_adam_descent_step_on_the_control_decreases_the_loss() {
    let supply = SupplySpec::new(SupplyKind::ConstantMean, 0.1);
    for arch in [ArchKind::Mlp, ArchKind::Rnn] {
        for kind in [CostKind::Quadratic, CostKind::QuarticPerturbed] {
            let tr = Trainer::new(config(arch, kind, supply)).unwrap();
            let l0 = tr.evaluate(&X0).unwrap().1;
            let g = tr.control_gradient(&X0).unwrap();
            let mut v = tr.theta_v.clone();
            let cfg = AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            };
            AdamState::new(cfg, &v).apply(&mut v, &g, Direction::Descent).unwrap();
            let after = Trainer::with_params(tr.config.clone(), v, tr.theta_w.clone()).unwrap();
            let l1 = after.evaluate(&X0).unwrap().1;
            assert!(l1 < l0, "{arch:?}/{kind:?}: {l0} -> {l1}");
        }
    }
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let supply = SupplySpec::new(SupplyKind::OscillatingMean, 0.0);
    for arch in [ArchKind::Mlp, ArchKind::Rnn] {
        let cfg = config(arch, CostKind::QuarticPerturbed, supply);
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(cfg).unwrap();
        for _ in 0..7 {
            assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        }
        assert_eq!(a.theta_v, b.theta_v);
        assert_eq!(a.theta_w, b.theta_w);
    }
}

#[test]
fn each_iteration_draws_one_sample_shared_by_both_updates() {
    let supply = SupplySpec::new(SupplyKind::ConstantMean, 0.1);
    let cfg = config(ArchKind::Mlp, CostKind::Quadratic, supply);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let mut replay = Trainer::new(cfg.clone()).unwrap();
    let mut adam_v = AdamState::new(cfg.adam_v, &replay.theta_v);
    let mut adam_w = AdamState::new(cfg.adam_w, &replay.theta_w);
    let mut previous: Option<Vec<f64>> = None;
    for _ in 0..4 {
        let report = tr.train_step().unwrap();
        assert_eq!(report.x0.len(), cfg.sample_size);
        if let Some(p) = &previous {
            assert_ne!(p, &report.x0, "sample reused across iterations");
        }
        // descend on the control, then ascend on the price with the new
        // control, both on the iteration's single sample
        let gv = replay.control_gradient(&report.x0).unwrap();
        let mut v = replay.theta_v.clone();
        adam_v.apply(&mut v, &gv, Direction::Descent).unwrap();
        replay = Trainer::with_params(cfg.clone(), v, replay.theta_w.clone()).unwrap();
        let gw = replay.price_gradient(&report.x0).unwrap();
        let mut w = replay.theta_w.clone();
        adam_w.apply(&mut w, &gw, Direction::Ascent).unwrap();
        replay = Trainer::with_params(cfg.clone(), replay.theta_v.clone(), w).unwrap();
        assert_eq!(replay.theta_v, tr.theta_v);
        assert_eq!(replay.theta_w, tr.theta_w);
        previous = Some(report.x0);
    }
}
