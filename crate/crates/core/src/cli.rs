//! Command-line front end: `train | oracle | nplayer | residuals`.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::error::Error;
use crate::estimator::{residuals, ResidualNorms, ResidualReport};
use crate::io;
use crate::model::{gaussian_density, sample_initial_positions, CostKind};
use crate::oracle::{
    hj_residual, lq_coefficients, lq_density, lq_feedback, lq_optimal_batch, nplayer_solve,
    LqPrice, NPlayerSolution,
};
use crate::rollout::control_on_grid;
use crate::training::{train, PriceReference, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mfgprice", about = "Mean-field price formation solver", version)]
pub struct Cli {
    /// TOML configuration; defaults to the lq-constant preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing and locked for the run.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the number of training iterations.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarial training of the control and price networks.
    Train,
    /// Closed-form LQ price, value coefficients, density and trajectories.
    Oracle,
    /// N-player benchmark by dual ascent.
    Nplayer,
    /// A-posteriori residuals of a trajectory batch CSV.
    Residuals {
        #[arg(long)]
        batch: PathBuf,
    },
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_)
            | Error::NonConvergence { .. }
            | Error::MaxIterations { .. }
            | Error::Domain { .. }
            | Error::ShapeMismatch { .. }
            | Error::EmptyTape
            | Error::NodeOutOfRange { .. } => CliError::Numerical(e.to_string()),
            Error::WrongCostKind => CliError::Config(format!("configuration error: {e}")),
            other => CliError::Config(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolves the configuration with command-line overrides applied.
pub fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::from_toml("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = cli.iterations {
        cfg.train.iterations = iters;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let _lock = OutputLock::acquire(&cli.out)?;
    match &cli.command {
        Command::Train => run_train(&cfg, &cli.out),
        Command::Oracle => run_oracle(&cfg, &cli.out),
        Command::Nplayer => run_nplayer(&cfg, &cli.out),
        Command::Residuals { batch } => run_residuals(&cfg, &cli.out, batch),
    }
}

/// Exclusive ownership of an output directory for the lifetime of a run.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".mfgprice.lock";

    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Config(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
struct ConfigEcho<'a> {
    config_hash: String,
    config: &'a RunConfig,
}

fn write_config(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let echo = ConfigEcho {
        config_hash: cfg.hash(),
        config: cfg,
    };
    Ok(io::write_json(&out.join("config.json"), &echo)?)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct NormSummary {
    eps_run_norm: f64,
    eps_t_norm: f64,
    eps_q_norm: f64,
    estimate: f64,
}

impl From<&ResidualReport> for NormSummary {
    fn from(r: &ResidualReport) -> Self {
        let ResidualNorms {
            eps_run,
            eps_t,
            eps_q,
        } = r.norms;
        Self {
            eps_run_norm: eps_run,
            eps_t_norm: eps_t,
            eps_q_norm: eps_q,
            estimate: r.estimate,
        }
    }
}

/// Deterministic end-of-run summary; wall-clock time goes to `timing.json`.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    experiment: crate::config::Experiment,
    config_hash: String,
    iterations: usize,
    epochs: usize,
    final_loss: f64,
    residuals: NormSummary,
    price_l2_err: Option<f64>,
    price_linf_err: Option<f64>,
    control_max_err: Option<f64>,
    control_max_weighted_err: Option<f64>,
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Oracle price on the training grid: closed form for the quadratic cost,
/// the N-player benchmark otherwise.
fn reference_price(cfg: &RunConfig) -> CliResult<PriceReference> {
    let price = match cfg.cost.kind {
        CostKind::Quadratic => LqPrice::new(&cfg.cost, &cfg.supply, cfg.grid.horizon(), cfg.initial.mean)?
            .sample(&cfg.grid),
        CostKind::QuarticPerturbed => solve_benchmark(cfg)?.price,
    };
    Ok(PriceReference::for_cost(cfg.cost.kind, price))
}

fn solve_benchmark(cfg: &RunConfig) -> CliResult<NPlayerSolution> {
    let x0 = cfg.nplayer_positions();
    Ok(nplayer_solve(&cfg.cost, &x0, &cfg.supply, &cfg.grid, &cfg.nplayer_options())?)
}

fn run_train(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    write_config(cfg, out)?;
    let reference = reference_price(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(Error::from)?;
    let mut log = io::TrainLogWriter::create(out)?;
    let mut observer = |rec: &crate::training::EpochRecord, tr: &Trainer| {
        log.push(rec)?;
        io::write_checkpoint(&ckpt_dir.join(format!("epoch_{:05}_v.json", rec.epoch)), &tr.theta_v)?;
        io::write_checkpoint(&ckpt_dir.join(format!("epoch_{:05}_w.json", rec.epoch)), &tr.theta_w)?;
        println!(
            "epoch {:>4} iter {:>7} loss {:+.4e} estimate {:.4e} price_linf {}",
            rec.epoch,
            rec.iter,
            rec.loss,
            rec.estimate,
            rec.price_linf_err.map(|e| format!("{e:.4e}")).unwrap_or_default()
        );
        Ok(())
    };
    let outcome = match train(cfg.train_config(), Some(&reference), &mut observer) {
        Ok(o) => o,
        Err(abort) => {
            #[derive(Serialize)]
            struct Abort<'a> {
                iteration: usize,
                epochs_completed: usize,
                error: &'a str,
            }
            let msg = abort.error.to_string();
            io::write_json(
                &out.join("abort.json"),
                &Abort {
                    iteration: abort.iteration,
                    epochs_completed: abort.log.records.len(),
                    error: &msg,
                },
            )?;
            return Err(CliError::from(abort.error));
        }
    };

    let tc = cfg.train_config();
    let trainer = Trainer::with_params(tc.clone(), outcome.theta_v.clone(), outcome.theta_w.clone())?;
    let (batch, loss) = trainer.evaluate(&outcome.last_sample)?;
    let report = residuals(&batch, &cfg.cost)?;
    io::write_batch_csv(&out.join("batch.csv"), &batch)?;
    io::write_residuals(out, "residuals", &report)?;
    io::write_price_comparison_csv(&out.join("price_curve.csv"), &cfg.grid, &reference.price, &batch.price)?;
    let (price_l2, price_linf) = reference.errors(&batch.price, cfg.grid.dt());

    let (mut control_max, mut control_weighted) = (None, None);
    if cfg.cost.kind == CostKind::Quadratic {
        let rows = control_error_rows(cfg, &reference.price, &trainer)?;
        io::write_control_error_csv(&out.join("control_error.csv"), &rows)?;
        control_max = rows.iter().map(|r| (r.v_oracle - r.v_nn).abs()).reduce(f64::max);
        control_weighted = rows.iter().map(|r| r.m_weighted_err).reduce(f64::max);
    }

    let summary = RunSummary {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        iterations: cfg.train.iterations,
        epochs: outcome.log.records.len(),
        final_loss: loss,
        residuals: NormSummary::from(&report),
        price_l2_err: Some(price_l2),
        price_linf_err: Some(price_linf),
        control_max_err: control_max,
        control_max_weighted_err: control_weighted,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    write_timing(out, started)?;
    println!("summary written to {}", out.join("summary.json").display());
    Ok(())
}

fn control_error_rows(
    cfg: &RunConfig,
    price: &[f64],
    trainer: &Trainer,
) -> CliResult<Vec<io::ControlErrorRow>> {
    let lq = LqPrice::new(&cfg.cost, &cfg.supply, cfg.grid.horizon(), cfg.initial.mean)?;
    let coeffs = lq_coefficients(&cfg.cost, &|t| lq.eval(t), &cfg.grid, cfg.oracle.refine)?;
    let density = lq_density(&cfg.cost, &cfg.initial, &coeffs, &cfg.supply)?;
    let o = &cfg.oracle;
    let xs: Vec<f64> = (0..o.grid_nx)
        .map(|j| o.x_min + (o.x_max - o.x_min) * j as f64 / (o.grid_nx - 1) as f64)
        .collect();
    let nn = control_on_grid(
        cfg.train.arch,
        &trainer.theta_v,
        &trainer.theta_w,
        &xs,
        &cfg.grid,
        &cfg.supply,
        &trainer.config.rollout,
    )?;
    let mut rows = Vec::with_capacity((cfg.grid.steps() + 1) * xs.len());
    for k in 0..=cfg.grid.steps() {
        for (j, &x) in xs.iter().enumerate() {
            let v_oracle = lq_feedback(&cfg.cost, &coeffs, price, k, x)?;
            let v_nn = nn[k][j];
            let m = gaussian_density(density.mean[k], density.std[k], x);
            rows.push(io::ControlErrorRow {
                t: cfg.grid.t(k),
                x,
                v_oracle,
                v_nn,
                m_weighted_err: m * (v_oracle - v_nn).abs(),
            });
        }
    }
    Ok(rows)
}

fn write_timing(out: &Path, started: Instant) -> CliResult<()> {
    #[derive(Serialize)]
    struct Timing {
        seconds: f64,
    }
    Ok(io::write_json(
        &out.join("timing.json"),
        &Timing {
            seconds: started.elapsed().as_secs_f64(),
        },
    )?)
}

fn run_oracle(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    write_config(cfg, out)?;
    let lq = LqPrice::new(&cfg.cost, &cfg.supply, cfg.grid.horizon(), cfg.initial.mean)?;
    let price = lq.sample(&cfg.grid);
    let coeffs = lq_coefficients(&cfg.cost, &|t| lq.eval(t), &cfg.grid, cfg.oracle.refine)?;
    let density = lq_density(&cfg.cost, &cfg.initial, &coeffs, &cfg.supply)?;
    let hj = hj_residual(
        &cfg.cost,
        &coeffs,
        &|t| lq.eval(t),
        20,
        (cfg.oracle.x_min, cfg.oracle.x_max),
        20,
    )?;
    io::write_price_csv(&out.join("price.csv"), &cfg.grid, &price)?;
    io::write_coefficients_csv(&out.join("coefficients.csv"), &coeffs)?;
    io::write_density_csv(&out.join("density.csv"), &cfg.grid, &density)?;

    let x0 = sample_initial_positions(&cfg.initial, cfg.train.sample_size, cfg.seed);
    let (batch, _) = lq_optimal_batch(&cfg.cost, &cfg.supply, &cfg.grid, &x0, cfg.oracle.refine)?;
    let report = residuals(&batch, &cfg.cost)?;
    io::write_batch_csv(&out.join("batch.csv"), &batch)?;
    io::write_residuals(out, "residuals", &report)?;

    #[derive(Serialize)]
    struct OracleSummary {
        config_hash: String,
        price_at_zero: f64,
        hj_residual_linf: f64,
        batch_residuals: NormSummary,
    }
    io::write_json(
        &out.join("summary.json"),
        &OracleSummary {
            config_hash: cfg.hash(),
            price_at_zero: price[0],
            hj_residual_linf: hj,
            batch_residuals: NormSummary::from(&report),
        },
    )?;
    write_timing(out, started)?;
    println!("price(0) = {:.6}, HJ residual = {hj:.3e}", price[0]);
    Ok(())
}

fn run_nplayer(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    write_config(cfg, out)?;
    let x0 = cfg.nplayer_positions();
    let (solution, failure) =
        match nplayer_solve(&cfg.cost, &x0, &cfg.supply, &cfg.grid, &cfg.nplayer_options()) {
            Ok(s) => (s, None),
            // keep the best iterate on disk for inspection
            Err(Error::MaxIterations {
                iterations,
                residual,
                best,
            }) => (
                *best,
                Some(format!(
                    "dual ascent stopped after {iterations} iterations with balance residual {residual:e}"
                )),
            ),
            Err(e) => return Err(e.into()),
        };
    let batch = solution.to_batch();
    let report = residuals(&batch, &cfg.cost)?;
    io::write_batch_csv(&out.join("batch.csv"), &batch)?;
    io::write_price_csv(&out.join("price.csv"), &cfg.grid, &solution.price)?;
    io::write_residuals(out, "residuals", &report)?;

    #[derive(Serialize)]
    struct NPlayerSummary {
        config_hash: String,
        players: usize,
        iterations: usize,
        rho: f64,
        balance_residual: f64,
        certified: bool,
        residuals: NormSummary,
    }
    io::write_json(
        &out.join("summary.json"),
        &NPlayerSummary {
            config_hash: cfg.hash(),
            players: cfg.nplayer.players,
            iterations: solution.iterations,
            rho: solution.rho,
            balance_residual: solution.balance_residual,
            certified: solution.certified,
            residuals: NormSummary::from(&report),
        },
    )?;
    write_timing(out, started)?;
    match failure {
        Some(m) => Err(CliError::Numerical(m)),
        None => {
            println!(
                "converged in {} iterations, balance residual {:.3e}",
                solution.iterations, solution.balance_residual
            );
            Ok(())
        }
    }
}

fn run_residuals(cfg: &RunConfig, out: &Path, batch_path: &Path) -> CliResult<()> {
    let batch = io::read_batch_csv(batch_path)?;
    let report = residuals(&batch, &cfg.cost)?;
    io::write_residuals(out, "residuals", &report)?;
    #[derive(Serialize)]
    struct ResidualSummary {
        batch: String,
        agents: usize,
        steps: usize,
        residuals: NormSummary,
    }
    let summary = ResidualSummary {
        batch: batch_path.display().to_string(),
        agents: batch.n_agents(),
        steps: batch.grid.steps(),
        residuals: NormSummary::from(&report),
    };
    io::write_json(&out.join("residuals_summary.json"), &summary)?;
    println!(
        "eps_run {:.3e}  eps_T {:.3e}  eps_q {:.3e}  estimate {:.3e}",
        summary.residuals.eps_run_norm,
        summary.residuals.eps_t_norm,
        summary.residuals.eps_q_norm,
        summary.residuals.estimate
    );
    Ok(())
}
