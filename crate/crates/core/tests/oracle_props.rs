//! Properties of the N-player benchmark.

use mfgprice::estimator::residuals;
use mfgprice::model::{
    quantile_positions, sample_initial_positions, CostKind, CostSpec, InitialDist, SupplyKind, SupplySpec,
    TimeGrid,
};
use mfgprice::oracle::{nplayer_solve, NPlayerOptions};

#[test]
fn dual_ascent_is_monotone_for_small_step() {
    let grid = TimeGrid::new(1.0, 30).unwrap();
    let dist = InitialDist::new(-0.25, 0.4).unwrap();
    for (kind, supply) in [
        (CostKind::Quadratic, SupplySpec::new(SupplyKind::ConstantMean, 0.1)),
        (CostKind::QuarticPerturbed, SupplySpec::new(SupplyKind::OscillatingMean, 0.0)),
    ] {
        let cost = CostSpec::reference(kind);
        let opts = NPlayerOptions {
            rho: Some(0.1 * cost.c),
            step_halving: false,
            ..NPlayerOptions::default()
        };
        let x0 = sample_initial_positions(&dist, 20, 5);
        let sol = nplayer_solve(&cost, &x0, &supply, &grid, &opts).unwrap();
        assert!(sol.certified);
        assert_eq!(sol.rho, 0.1 * cost.c);
        for w in sol.history.windows(2) {
            assert!(w[1] <= w[0], "{kind:?}: residual rose {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn stratified_benchmark_certifies_through_the_estimator() {
    let grid = TimeGrid::new(1.0, 30).unwrap();
    let cost = CostSpec::reference(CostKind::QuarticPerturbed);
    let supply = SupplySpec::new(SupplyKind::OscillatingMean, 0.0);
    let x0 = quantile_positions(&InitialDist::new(-0.25, 0.4).unwrap(), 50);
    let opts = NPlayerOptions::default();
    let sol = nplayer_solve(&cost, &x0, &supply, &grid, &opts).unwrap();
    let r = residuals(&sol.to_batch(), &cost).unwrap();
    for v in [r.norms.eps_run, r.norms.eps_t, r.norms.eps_q] {
        assert!(v.sqrt() <= 10.0 * opts.tol, "{v:e}");
    }
}
