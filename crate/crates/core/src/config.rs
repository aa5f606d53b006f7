//! Run configuration: a TOML file layered over one of three presets.
//!
//! ```toml
//! experiment = "lq-constant"   # lq-constant | lq-oscillating | quartic-oscillating
//! seed = 0
//!
//! [model]    # kind, eta, kappa, c, gamma, zeta
//! [supply]   # kind, q0
//! [initial]  # mean, std
//! [grid]     # horizon, steps
//! [train]    # arch, iterations, sample_size, epoch, lr_v, lr_w, beta1, beta2, adam_eps, scale_time
//! [oracle]   # refine, grid_nx, x_min, x_max
//! [nplayer]  # players, tol, rho, max_outer, step_halving, stratified, seed
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    quantile_positions, sample_initial_positions, CostKind, CostSpec, InitialDist, SupplyKind,
    SupplySpec, TimeGrid,
};
use crate::nn::AdamConfig;
use crate::oracle::{NPlayerOptions, DEFAULT_REFINE};
use crate::rollout::{ArchKind, RolloutOptions};
use crate::training::{Seeds, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LqConstant,
    LqOscillating,
    QuarticOscillating,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub arch: ArchKind,
    pub iterations: usize,
    pub sample_size: usize,
    pub epoch: usize,
    pub lr_v: f64,
    pub lr_w: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub scale_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSection {
    pub refine: usize,
    pub grid_nx: usize,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NPlayerSection {
    pub players: usize,
    pub tol: f64,
    pub rho: Option<f64>,
    pub max_outer: usize,
    pub step_halving: bool,
    /// Quantile positions of `m_0` instead of random draws.
    pub stratified: bool,
    pub seed: u64,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub cost: CostSpec,
    pub supply: SupplySpec,
    pub initial: InitialDist,
    pub grid: TimeGrid,
    pub train: TrainSection,
    pub oracle: OracleSection,
    pub nplayer: NPlayerSection,
}

impl RunConfig {
    pub fn preset(experiment: Experiment) -> Self {
        let (kind, supply) = match experiment {
            Experiment::LqConstant => (CostKind::Quadratic, SupplySpec::new(SupplyKind::ConstantMean, 0.1)),
            Experiment::LqOscillating => (CostKind::Quadratic, SupplySpec::new(SupplyKind::OscillatingMean, 0.0)),
            Experiment::QuarticOscillating => (
                CostKind::QuarticPerturbed,
                SupplySpec::new(SupplyKind::OscillatingMean, 0.0),
            ),
        };
        let adam = AdamConfig::default();
        Self {
            experiment,
            seed: 0,
            cost: CostSpec::reference(kind),
            supply,
            initial: InitialDist {
                mean: -0.25,
                std: 0.4,
            },
            grid: TimeGrid::new(1.0, 30).expect("preset grid is valid"),
            train: TrainSection {
                arch: ArchKind::Mlp,
                iterations: 200_000,
                sample_size: 10,
                epoch: 500,
                lr_v: adam.lr,
                lr_w: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                adam_eps: adam.eps,
                scale_time: false,
            },
            oracle: OracleSection {
                refine: DEFAULT_REFINE,
                grid_nx: 21,
                x_min: -1.0,
                x_max: 1.0,
            },
            nplayer: NPlayerSection {
                players: 500,
                tol: 1e-8,
                rho: None,
                max_outer: 200_000,
                step_halving: true,
                stratified: true,
                seed: 1000,
            },
        }
    }

    /// Parses TOML text and validates the result.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: FileConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        let mut cfg = Self::preset(file.experiment.unwrap_or(Experiment::LqConstant));
        file.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &str, reason: String| ConfigError(format!("invalid value for `{f}`: {reason}"));
        self.cost.validate().map_err(ConfigError::from)?;
        InitialDist::new(self.initial.mean, self.initial.std).map_err(ConfigError::from)?;
        if !self.supply.q0.is_finite() {
            return Err(field("supply.q0", "must be finite".into()));
        }
        let t = &self.train;
        for (name, v) in [
            ("train.iterations", t.iterations),
            ("train.sample_size", t.sample_size),
            ("train.epoch", t.epoch),
            ("oracle.refine", self.oracle.refine),
            ("nplayer.players", self.nplayer.players),
            ("nplayer.max_outer", self.nplayer.max_outer),
        ] {
            if v == 0 {
                return Err(field(name, "must be >= 1".into()));
            }
        }
        for (name, v) in [("train.lr_v", t.lr_v), ("train.lr_w", t.lr_w)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(field(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(field(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(t.adam_eps > 0.0) {
            return Err(field("train.adam_eps", format!("must be > 0, got {}", t.adam_eps)));
        }
        if self.oracle.refine % 2 != 0 {
            return Err(field("oracle.refine", format!("must be even, got {}", self.oracle.refine)));
        }
        if self.oracle.grid_nx < 2 || !(self.oracle.x_min < self.oracle.x_max) {
            return Err(field("oracle.grid_nx", "need at least 2 points on a nonempty interval".into()));
        }
        if !(self.nplayer.tol > 0.0) {
            return Err(field("nplayer.tol", format!("must be > 0, got {}", self.nplayer.tol)));
        }
        if let Some(rho) = self.nplayer.rho {
            if !(rho > 0.0) {
                return Err(field("nplayer.rho", format!("must be > 0, got {rho}")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let adam = |lr| AdamConfig {
            lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        };
        TrainConfig {
            arch: t.arch,
            iterations: t.iterations,
            sample_size: t.sample_size,
            epoch: t.epoch,
            adam_v: adam(t.lr_v),
            adam_w: adam(t.lr_w),
            seeds: Seeds::from_base(self.seed),
            grid: self.grid,
            cost: self.cost,
            supply: self.supply,
            initial: self.initial,
            rollout: RolloutOptions {
                scale_time: t.scale_time,
            },
        }
    }

    /// Initial positions of the N-player benchmark.
    pub fn nplayer_positions(&self) -> Vec<f64> {
        if self.nplayer.stratified {
            quantile_positions(&self.initial, self.nplayer.players)
        } else {
            sample_initial_positions(&self.initial, self.nplayer.players, self.nplayer.seed)
        }
    }

    pub fn nplayer_options(&self) -> NPlayerOptions {
        NPlayerOptions {
            tol: self.nplayer.tol,
            rho: self.nplayer.rho,
            step_halving: self.nplayer.step_halving,
            max_outer: self.nplayer.max_outer,
            ..NPlayerOptions::default()
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// A configuration problem, reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    experiment: Option<Experiment>,
    seed: Option<u64>,
    model: Option<ModelFile>,
    supply: Option<SupplyFile>,
    initial: Option<InitialFile>,
    grid: Option<GridFile>,
    train: Option<TrainFile>,
    oracle: Option<OracleFile>,
    nplayer: Option<NPlayerFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    kind: Option<CostKind>,
    eta: Option<f64>,
    kappa: Option<f64>,
    c: Option<f64>,
    gamma: Option<f64>,
    zeta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupplyFile {
    kind: Option<SupplyKind>,
    q0: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    mean: Option<f64>,
    std: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    horizon: Option<f64>,
    steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    arch: Option<ArchKind>,
    iterations: Option<usize>,
    sample_size: Option<usize>,
    epoch: Option<usize>,
    lr_v: Option<f64>,
    lr_w: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    scale_time: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    refine: Option<usize>,
    grid_nx: Option<usize>,
    x_min: Option<f64>,
    x_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NPlayerFile {
    players: Option<usize>,
    tol: Option<f64>,
    rho: Option<f64>,
    max_outer: Option<usize>,
    step_halving: Option<bool>,
    stratified: Option<bool>,
    seed: Option<u64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl FileConfig {
    fn apply(self, cfg: &mut RunConfig) -> Result<(), ConfigError> {
        set(&mut cfg.seed, self.seed);
        if let Some(m) = self.model {
            set(&mut cfg.cost.kind, m.kind);
            set(&mut cfg.cost.eta, m.eta);
            set(&mut cfg.cost.kappa, m.kappa);
            set(&mut cfg.cost.c, m.c);
            set(&mut cfg.cost.gamma, m.gamma);
            set(&mut cfg.cost.zeta, m.zeta);
        }
        if let Some(s) = self.supply {
            set(&mut cfg.supply.kind, s.kind);
            set(&mut cfg.supply.q0, s.q0);
        }
        if let Some(i) = self.initial {
            set(&mut cfg.initial.mean, i.mean);
            set(&mut cfg.initial.std, i.std);
        }
        if let Some(g) = self.grid {
            let horizon = g.horizon.unwrap_or(cfg.grid.horizon());
            let steps = g.steps.unwrap_or(cfg.grid.steps());
            cfg.grid = TimeGrid::new(horizon, steps).map_err(ConfigError::from)?;
        }
        if let Some(t) = self.train {
            let tr = &mut cfg.train;
            set(&mut tr.arch, t.arch);
            set(&mut tr.iterations, t.iterations);
            set(&mut tr.sample_size, t.sample_size);
            set(&mut tr.epoch, t.epoch);
            set(&mut tr.lr_v, t.lr_v);
            set(&mut tr.lr_w, t.lr_w);
            set(&mut tr.beta1, t.beta1);
            set(&mut tr.beta2, t.beta2);
            set(&mut tr.adam_eps, t.adam_eps);
            set(&mut tr.scale_time, t.scale_time);
        }
        if let Some(o) = self.oracle {
            set(&mut cfg.oracle.refine, o.refine);
            set(&mut cfg.oracle.grid_nx, o.grid_nx);
            set(&mut cfg.oracle.x_min, o.x_min);
            set(&mut cfg.oracle.x_max, o.x_max);
        }
        if let Some(n) = self.nplayer {
            let np = &mut cfg.nplayer;
            set(&mut np.players, n.players);
            set(&mut np.tol, n.tol);
            if n.rho.is_some() {
                np.rho = n.rho;
            }
            set(&mut np.max_outer, n.max_outer);
            set(&mut np.step_halving, n.step_halving);
            set(&mut np.stratified, n.stratified);
            set(&mut np.seed, n.seed);
        }
        Ok(())
    }
}
