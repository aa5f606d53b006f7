//! Adversarial loss and the alternating descent/ascent loop.
//!
//! Each iteration draws one sample of initial positions, takes an Adam
//! descent step on the control network, re-rolls the same sample with the
//! updated control network, and takes an Adam ascent step on the price
//! network.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{residuals, ResidualNorms};
use crate::model::{CostKind, CostSpec, InitialDist, SupplySpec, TimeGrid};
use crate::nn::{init_params, AdamConfig, AdamState, Direction, Node, ParamSet, Tape};
use crate::rollout::{rollout, ArchKind, RolloutNodes, RolloutOptions, TrajectoryBatch};

/// Seeds for the control initialisation, price initialisation and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub control: u64,
    pub price: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Self {
            control: seed,
            price: seed.wrapping_add(1),
            sampling: seed.wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchKind,
    pub iterations: usize,
    pub sample_size: usize,
    pub epoch: usize,
    pub adam_v: AdamConfig,
    pub adam_w: AdamConfig,
    pub seeds: Seeds,
    pub grid: TimeGrid,
    pub cost: CostSpec,
    pub supply: SupplySpec,
    pub initial: InitialDist,
    pub rollout: RolloutOptions,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("sample_size", self.sample_size),
            ("epoch", self.epoch),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter {
                    field,
                    reason: "must be >= 1".into(),
                });
            }
        }
        for (field, a) in [("lr_v", &self.adam_v), ("lr_w", &self.adam_w)] {
            if !(a.lr.is_finite() && a.lr >= 0.0) {
                return Err(Error::InvalidParameter {
                    field,
                    reason: format!("must be finite and >= 0, got {}", a.lr),
                });
            }
        }
        self.cost.validate()
    }
}

/// Price curve to compare against, on nodes `0..nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceReference {
    pub price: Vec<f64>,
    pub nodes: usize,
}

impl PriceReference {
    /// Full-horizon comparison for closed-form prices; the final node is
    /// dropped for the non-quadratic benchmark.
    pub fn for_cost(kind: CostKind, price: Vec<f64>) -> Self {
        let nodes = match kind {
            CostKind::Quadratic => price.len(),
            CostKind::QuarticPerturbed => price.len() - 1,
        };
        Self { price, nodes }
    }

    /// `(L², L∞)` of the difference, the L² norm as `(Δt Σ_k d_k²)^{1/2}`.
    pub fn errors(&self, price: &[f64], dt: f64) -> (f64, f64) {
        let mut sq = 0.0;
        let mut inf = 0.0f64;
        for k in 0..self.nodes {
            let d = price[k] - self.price[k];
            sq += d * d;
            inf = inf.max(d.abs());
        }
        ((dt * sq).sqrt(), inf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
    pub eps_run_norm: f64,
    pub eps_t_norm: f64,
    pub eps_q_norm: f64,
    pub estimate: f64,
    pub price_l2_err: Option<f64>,
    pub price_linf_err: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn add_rows(tape: &mut Tape<'_>, acc: Option<Node>, term: Node) -> Result<Node> {
    match acc {
        Some(a) => tape.add(a, term),
        None => Ok(term),
    }
}

fn control_cost_node(tape: &mut Tape<'_>, cost: &CostSpec, v: Node) -> Result<Node> {
    let sq = tape.powi(v, 2);
    match cost.kind {
        CostKind::Quadratic => Ok(tape.scale(sq, 0.5 * cost.c)),
        CostKind::QuarticPerturbed => {
            let a = tape.scale(sq, 0.25 * cost.c);
            let shifted = tape.offset(v, -1.0);
            let q = tape.powi(shifted, 4);
            let b = tape.scale(q, 0.125 * cost.c);
            tape.add(a, b)
        }
    }
}

/// The adversarial loss
/// `(1/N) Σ_i [ Σ_{k<M} Δt (L(X_k, v_k) + ϖ_k (v_k − Q_k)) + u_T(X_M) ]`
/// recorded on `tape`.
pub fn loss_eval(
    tape: &mut Tape<'_>,
    nodes: &RolloutNodes,
    batch: &TrajectoryBatch,
    cost: &CostSpec,
) -> Result<Node> {
    let m = batch.grid.steps();
    let n = batch.n_agents();
    let dt = batch.grid.dt();
    let mut running: Option<Node> = None;
    for k in 0..m {
        let (x, v) = (nodes.states[k], nodes.controls[k]);
        let shifted = tape.offset(x, -cost.kappa);
        let sq = tape.powi(shifted, 2);
        let pot = tape.scale(sq, 0.5 * cost.eta);
        let ell = control_cost_node(tape, cost, v)?;
        let q = tape.row(&vec![batch.supply[k]; n]);
        let excess = tape.sub(v, q)?;
        let w = tape.broadcast(nodes.price[k], n)?;
        let mult = tape.mul(w, excess)?;
        let lag = tape.add(ell, pot)?;
        let term = tape.add(lag, mult)?;
        running = Some(add_rows(tape, running, term)?);
    }
    let running = running.expect("grid has at least two steps");
    let run_sum = tape.sum(running);
    let run_scaled = tape.scale(run_sum, dt / n as f64);
    let shifted = tape.offset(nodes.states[m], -cost.zeta);
    let sq = tape.powi(shifted, 2);
    let term_sum = tape.sum(sq);
    let terminal = tape.scale(term_sum, 0.5 * cost.gamma / n as f64);
    tape.add(run_scaled, terminal)
}

/// The same loss evaluated directly from a batch.
pub fn loss_value(batch: &TrajectoryBatch, cost: &CostSpec) -> f64 {
    let m = batch.grid.steps();
    let dt = batch.grid.dt();
    let total: f64 = batch
        .states
        .iter()
        .zip(&batch.controls)
        .map(|(xs, vs)| {
            let running: f64 = (0..m)
                .map(|k| dt * (cost.lagrangian(xs[k], vs[k]) + batch.price[k] * (vs[k] - batch.supply[k])))
                .sum();
            running + cost.terminal(xs[m]).0
        })
        .sum();
    total / batch.n_agents() as f64
}

/// Parameters, optimiser states and the sampling stream.
pub struct Trainer {
    pub config: TrainConfig,
    pub theta_v: ParamSet,
    pub theta_w: ParamSet,
    adam_v: AdamState,
    adam_w: AdamState,
    rng: ChaCha8Rng,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub x0: Vec<f64>,
    /// Loss of the first rollout of the iteration.
    pub loss: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let theta_v = init_params(config.arch.control(), config.seeds.control);
        let theta_w = init_params(config.arch.price(), config.seeds.price);
        Self::with_params(config, theta_v, theta_w)
    }

    pub fn with_params(config: TrainConfig, theta_v: ParamSet, theta_w: ParamSet) -> Result<Self> {
        config.validate()?;
        for (p, want) in [(&theta_v, config.arch.control()), (&theta_w, config.arch.price())] {
            p.check_shapes()?;
            if p.arch != want {
                return Err(Error::ShapeMismatch {
                    context: "trainer parameters",
                    expected: format!("{want:?}"),
                    got: format!("{:?}", p.arch),
                });
            }
        }
        Ok(Self {
            adam_v: AdamState::new(config.adam_v, &theta_v),
            adam_w: AdamState::new(config.adam_w, &theta_w),
            rng: ChaCha8Rng::seed_from_u64(config.seeds.sampling),
            theta_v,
            theta_w,
            iteration: 0,
            config,
        })
    }

    /// Rollout and loss without gradients.
    pub fn evaluate(&self, x0: &[f64]) -> Result<(TrajectoryBatch, f64)> {
        let c = &self.config;
        let mut tape = Tape::new();
        let pv = tape.bind(&self.theta_v, false);
        let pw = tape.bind(&self.theta_w, false);
        let r = rollout(c.arch, &mut tape, pv, pw, x0, &c.grid, &c.supply, &c.rollout)?;
        let loss = loss_value(&r.batch, &c.cost);
        Ok((r.batch, loss))
    }

    fn gradient(&self, x0: &[f64], wrt_control: bool) -> Result<(f64, Vec<nalgebra::DMatrix<f64>>)> {
        let c = &self.config;
        let mut tape = Tape::new();
        let pv = tape.bind(&self.theta_v, wrt_control);
        let pw = tape.bind(&self.theta_w, !wrt_control);
        let r = rollout(c.arch, &mut tape, pv, pw, x0, &c.grid, &c.supply, &c.rollout)?;
        let loss = loss_eval(&mut tape, &r.nodes, &r.batch, &c.cost)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads = tape.backward(loss)?;
        let g = grads.swap_remove(if wrt_control { 0 } else { 1 });
        Ok((value, g))
    }

    /// Gradient of the loss with respect to the price parameters.
    pub fn price_gradient(&self, x0: &[f64]) -> Result<Vec<nalgebra::DMatrix<f64>>> {
        Ok(self.gradient(x0, false)?.1)
    }

    pub fn control_gradient(&self, x0: &[f64]) -> Result<Vec<nalgebra::DMatrix<f64>>> {
        Ok(self.gradient(x0, true)?.1)
    }

    /// One iteration of the alternating scheme.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let x0 = self.config.initial.sample_with(&mut self.rng, self.config.sample_size);
        let (loss, gv) = self.gradient(&x0, true)?;
        self.adam_v.apply(&mut self.theta_v, &gv, Direction::Descent)?;
        let (_, gw) = self.gradient(&x0, false)?;
        self.adam_w.apply(&mut self.theta_w, &gw, Direction::Ascent)?;
        self.iteration += 1;
        Ok(StepReport { x0, loss })
    }

    /// Loss, residual norms and price errors on `x0` with the current parameters.
    pub fn record(
        &self,
        x0: &[f64],
        reference: Option<&PriceReference>,
        epoch: usize,
        seconds: f64,
    ) -> Result<EpochRecord> {
        let (batch, loss) = self.evaluate(x0)?;
        let report = residuals(&batch, &self.config.cost)?;
        let ResidualNorms {
            eps_run,
            eps_t,
            eps_q,
        } = report.norms;
        let errs = reference.map(|r| r.errors(&batch.price, batch.grid.dt()));
        Ok(EpochRecord {
            epoch,
            iter: self.iteration,
            loss,
            eps_run_norm: eps_run,
            eps_t_norm: eps_t,
            eps_q_norm: eps_q,
            estimate: report.estimate,
            price_l2_err: errs.map(|e| e.0),
            price_linf_err: errs.map(|e| e.1),
            seconds,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta_v: ParamSet,
    pub theta_w: ParamSet,
    pub log: TrainLog,
    /// Initial positions drawn in the last iteration.
    pub last_sample: Vec<f64>,
}

/// A run stopped by a numerical failure, with the epochs completed so far.
#[derive(Debug)]
pub struct TrainAbort {
    pub log: TrainLog,
    pub iteration: usize,
    pub error: Error,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted at iteration {}: {}", self.iteration, self.error)
    }
}

impl std::error::Error for TrainAbort {}

/// Runs `config.iterations` steps, recording after every `epoch` steps and
/// after the last one. `observer` sees each record together with the trainer.
pub fn train(
    config: TrainConfig,
    reference: Option<&PriceReference>,
    observer: &mut dyn FnMut(&EpochRecord, &Trainer) -> Result<()>,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let abort = |log: TrainLog, iteration: usize, error: Error| TrainAbort {
        log,
        iteration,
        error,
    };
    let mut trainer = Trainer::new(config).map_err(|e| abort(TrainLog::default(), 0, e))?;
    let mut log = TrainLog::default();
    let start = Instant::now();
    let total = trainer.config.iterations;
    let epoch_len = trainer.config.epoch;
    let mut last_sample = Vec::new();
    for j in 1..=total {
        let step = match trainer.train_step() {
            Ok(s) => s,
            Err(e) => return Err(abort(log, j, e)),
        };
        if j % epoch_len == 0 || j == total {
            let epoch = log.records.len() + 1;
            let rec = match trainer.record(&step.x0, reference, epoch, start.elapsed().as_secs_f64()) {
                Ok(r) => r,
                Err(e) => return Err(abort(log, j, e)),
            };
            if let Err(e) = observer(&rec, &trainer) {
                return Err(abort(log, j, e));
            }
            log.records.push(rec);
        }
        last_sample = step.x0;
    }
    Ok(TrainOutcome {
        theta_v: trainer.theta_v,
        theta_w: trainer.theta_w,
        log,
        last_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SupplyKind;

    pub(crate) fn small_config(arch: ArchKind) -> TrainConfig {
        TrainConfig {
            arch,
            iterations: 3,
            sample_size: 4,
            epoch: 2,
            adam_v: AdamConfig::default(),
            adam_w: AdamConfig::default(),
            seeds: Seeds::from_base(1),
            grid: TimeGrid::new(1.0, 5).unwrap(),
            cost: CostSpec::reference(CostKind::Quadratic),
            supply: SupplySpec::new(SupplyKind::ConstantMean, 0.1),
            initial: InitialDist::new(-0.25, 0.4).unwrap(),
            rollout: RolloutOptions::default(),
        }
    }

    fn hand_batch() -> TrajectoryBatch {
        TrajectoryBatch {
            grid: TimeGrid::new(2.0, 2).unwrap(),
            states: vec![vec![0.0, 1.0, 2.0]],
            controls: vec![vec![1.0, 1.0, 0.0]],
            price: vec![2.0, 2.0, 0.0],
            supply: vec![0.0; 3],
        }
    }

    #[test]
    fn hand_computed_loss() {
        // Δt = 1, η = 0, c = 1, γ = 1, ζ = 0: two steps of (0.5 + 2) plus u_T(2) = 2
        let cost = CostSpec::new(CostKind::Quadratic, 0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(loss_value(&hand_batch(), &cost), 7.0);
    }

    #[test]
    fn loss_at_rest_is_zero() {
        let cost = CostSpec::new(CostKind::Quadratic, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let b = TrajectoryBatch {
            grid: TimeGrid::new(1.0, 4).unwrap(),
            states: vec![vec![1.0; 5]; 3],
            controls: vec![vec![0.0; 5]; 3],
            price: vec![0.0; 5],
            supply: vec![0.0; 5],
        };
        assert_eq!(loss_value(&b, &cost), 0.0);
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        for (arch, kind) in [
            (ArchKind::Mlp, CostKind::Quadratic),
            (ArchKind::Rnn, CostKind::QuarticPerturbed),
        ] {
            let mut cfg = small_config(arch);
            cfg.cost = CostSpec::reference(kind);
            let tr = Trainer::new(cfg.clone()).unwrap();
            let x0 = [0.1, -0.2, 0.3, 0.0];
            let mut tape = Tape::new();
            let pv = tape.bind(&tr.theta_v, false);
            let pw = tape.bind(&tr.theta_w, false);
            let r = rollout(arch, &mut tape, pv, pw, &x0, &cfg.grid, &cfg.supply, &cfg.rollout).unwrap();
            let l = loss_eval(&mut tape, &r.nodes, &r.batch, &cfg.cost).unwrap();
            let direct = loss_value(&r.batch, &cfg.cost);
            assert!((tape.scalar(l) - direct).abs() < 1e-13 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let mut cfg = small_config(ArchKind::Mlp);
        cfg.adam_v.lr = 0.0;
        cfg.adam_w.lr = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let (v0, w0) = (tr.theta_v.clone(), tr.theta_w.clone());
        tr.train_step().unwrap();
        tr.train_step().unwrap();
        assert_eq!(tr.theta_v, v0);
        assert_eq!(tr.theta_w, w0);
    }

    #[test]
    fn epoch_count() {
        let mut n = 0;
        let out = train(small_config(ArchKind::Mlp), None, &mut |_, _| {
            n += 1;
            Ok(())
        })
        .unwrap();
        // iterations 2 and 3
        assert_eq!(out.log.records.len(), 2);
        assert_eq!(n, 2);
        assert_eq!(out.log.records[1].iter, 3);
        let mut cfg = small_config(ArchKind::Mlp);
        cfg.iterations = 1;
        cfg.epoch = 500;
        assert_eq!(train(cfg, None, &mut |_, _| Ok(())).unwrap().log.records.len(), 1);
    }

    #[test]
    fn reference_errors() {
        let r = PriceReference::for_cost(CostKind::QuarticPerturbed, vec![0.0, 0.0, 0.0]);
        let (l2, inf) = r.errors(&[1.0, 2.0, 100.0], 0.5);
        assert_eq!(inf, 2.0);
        assert!((l2 - (0.5f64 * 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config(ArchKind::Mlp);
        cfg.sample_size = 0;
        assert!(Trainer::new(cfg).is_err());
    }
}
