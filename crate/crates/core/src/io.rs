//! CSV and JSON artefacts. Floats are written with 17 significant digits so
//! that every value reads back bit-exactly.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::ResidualReport;
use crate::model::TimeGrid;
use crate::nn::ParamSet;
use crate::oracle::{GaussianPath, LqCoefficients};
use crate::rollout::TrajectoryBatch;
use crate::training::EpochRecord;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// Columns `agent, k, t, X, v, price, Q`, one row per agent and node.
pub fn write_batch_csv(path: &Path, batch: &TrajectoryBatch) -> Result<()> {
    batch.validate()?;
    let mut w = writer(path)?;
    w.write_record(["agent", "k", "t", "X", "v", "price", "Q"])?;
    for (i, (xs, vs)) in batch.states.iter().zip(&batch.controls).enumerate() {
        for k in 0..=batch.grid.steps() {
            w.write_record([
                i.to_string(),
                k.to_string(),
                fmt_f64(batch.grid.t(k)),
                fmt_f64(xs[k]),
                fmt_f64(vs[k]),
                fmt_f64(batch.price[k]),
                fmt_f64(batch.supply[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| Error::Batch(format!("line {line}: missing column {idx}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Batch(format!("line {line}: cannot parse `{raw}`")))
}

/// Reads a batch written by [`write_batch_csv`]. The horizon is the time
/// of the last node and the step count its index.
pub fn read_batch_csv(path: &Path) -> Result<TrajectoryBatch> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expected = ["agent", "k", "t", "X", "v", "price", "Q"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Batch(format!(
            "expected header {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows: Vec<(usize, usize, f64, f64, f64, f64, f64)> = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n as u64 + 2;
        rows.push((
            parse_field(&rec, 0, line)?,
            parse_field(&rec, 1, line)?,
            parse_field(&rec, 2, line)?,
            parse_field(&rec, 3, line)?,
            parse_field(&rec, 4, line)?,
            parse_field(&rec, 5, line)?,
            parse_field(&rec, 6, line)?,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Batch("no rows".into()));
    }
    let agents = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let steps = rows.iter().map(|r| r.1).max().unwrap_or(0);
    if rows.len() != agents * (steps + 1) {
        return Err(Error::Batch(format!(
            "{} rows do not fill {agents} agents × {} nodes",
            rows.len(),
            steps + 1
        )));
    }
    let horizon = rows.iter().find(|r| r.1 == steps).map(|r| r.2).unwrap_or(0.0);
    let grid = TimeGrid::new(horizon, steps)?;
    let mut states = vec![vec![f64::NAN; steps + 1]; agents];
    let mut controls = vec![vec![f64::NAN; steps + 1]; agents];
    let mut price = vec![f64::NAN; steps + 1];
    let mut supply = vec![f64::NAN; steps + 1];
    let mut seen = vec![vec![false; steps + 1]; agents];
    for (i, k, t, x, v, w, q) in rows {
        if seen[i][k] {
            return Err(Error::Batch(format!("duplicate row for agent {i}, node {k}")));
        }
        seen[i][k] = true;
        if (t - grid.t(k)).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Batch(format!("node {k} has t = {t}, expected {}", grid.t(k))));
        }
        if !price[k].is_nan() && (price[k] != w || supply[k] != q) {
            return Err(Error::Batch(format!("price or supply differs across agents at node {k}")));
        }
        states[i][k] = x;
        controls[i][k] = v;
        price[k] = w;
        supply[k] = q;
    }
    let batch = TrajectoryBatch {
        grid,
        states,
        controls,
        price,
        supply,
    };
    batch.validate()?;
    Ok(batch)
}

/// Three files: `<stem>_running.csv` (agent, k, eps_run, in_aggregate),
/// `<stem>_terminal.csv` (agent, eps_T) and `<stem>_balance.csv`
/// (k, eps_q, in_aggregate). Node 0 is written with `in_aggregate = 0`.
pub fn write_residuals(dir: &Path, stem: &str, report: &ResidualReport) -> Result<()> {
    let mut w = writer(&dir.join(format!("{stem}_running.csv")))?;
    w.write_record(["agent", "k", "eps_run", "in_aggregate"])?;
    for (i, row) in report.eps_run.iter().enumerate() {
        w.write_record([i.to_string(), "0".into(), fmt_f64(report.eps_run_initial[i]), "0".into()])?;
        for (j, e) in row.iter().enumerate() {
            w.write_record([i.to_string(), (j + 1).to_string(), fmt_f64(*e), "1".into()])?;
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join(format!("{stem}_terminal.csv")))?;
    w.write_record(["agent", "eps_T"])?;
    for (i, e) in report.eps_t.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(*e)])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join(format!("{stem}_balance.csv")))?;
    w.write_record(["k", "eps_q", "in_aggregate"])?;
    w.write_record(["0".into(), fmt_f64(report.eps_q_initial), "0".to_string()])?;
    for (j, e) in report.eps_q.iter().enumerate() {
        w.write_record([(j + 1).to_string(), fmt_f64(*e), "1".into()])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, price`.
pub fn write_price_csv(path: &Path, grid: &TimeGrid, price: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "price"])?;
    for (k, p) in price.iter().enumerate() {
        w.write_record([fmt_f64(grid.t(k)), fmt_f64(*p)])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, price_oracle, price_nn, abs_err`.
pub fn write_price_comparison_csv(
    path: &Path,
    grid: &TimeGrid,
    oracle: &[f64],
    nn: &[f64],
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "price_oracle", "price_nn", "abs_err"])?;
    for k in 0..oracle.len().min(nn.len()) {
        w.write_record([
            fmt_f64(grid.t(k)),
            fmt_f64(oracle[k]),
            fmt_f64(nn[k]),
            fmt_f64((oracle[k] - nn[k]).abs()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, a0, a1, a2` on the coarse grid.
pub fn write_coefficients_csv(path: &Path, coeffs: &LqCoefficients) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "a0", "a1", "a2"])?;
    for k in 0..=coeffs.grid.steps() {
        w.write_record([
            fmt_f64(coeffs.grid.t(k)),
            fmt_f64(coeffs.a0[k]),
            fmt_f64(coeffs.a1[k]),
            fmt_f64(coeffs.a2[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, mean, std`.
pub fn write_density_csv(path: &Path, grid: &TimeGrid, density: &GaussianPath) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "mean", "std"])?;
    for k in 0..density.mean.len() {
        w.write_record([fmt_f64(grid.t(k)), fmt_f64(density.mean[k]), fmt_f64(density.std[k])])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the control error grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlErrorRow {
    pub t: f64,
    pub x: f64,
    pub v_oracle: f64,
    pub v_nn: f64,
    /// `|v_oracle − v_nn|` weighted by the oracle density at `(t, x)`.
    pub m_weighted_err: f64,
}

/// Columns `t, x, v_oracle, v_nn, abs_err, m_weighted_err`.
pub fn write_control_error_csv(path: &Path, rows: &[ControlErrorRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "x", "v_oracle", "v_nn", "abs_err", "m_weighted_err"])?;
    for r in rows {
        w.write_record([
            fmt_f64(r.t),
            fmt_f64(r.x),
            fmt_f64(r.v_oracle),
            fmt_f64(r.v_nn),
            fmt_f64((r.v_oracle - r.v_nn).abs()),
            fmt_f64(r.m_weighted_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const TRAIN_LOG_HEADER: [&str; 10] = [
    "epoch",
    "iter",
    "loss",
    "eps_run_norm",
    "eps_T_norm",
    "eps_q_norm",
    "estimate",
    "price_l2_err",
    "price_linf_err",
    "seconds",
];

fn train_log_row(r: &EpochRecord) -> [String; 10] {
    [
        r.epoch.to_string(),
        r.iter.to_string(),
        fmt_f64(r.loss),
        fmt_f64(r.eps_run_norm),
        fmt_f64(r.eps_t_norm),
        fmt_f64(r.eps_q_norm),
        fmt_f64(r.estimate),
        fmt_opt(r.price_l2_err),
        fmt_opt(r.price_linf_err),
        format!("{:.3}", r.seconds),
    ]
}

/// Appends training records as they arrive, flushing after each one so a
/// run that aborts keeps its partial log.
pub struct TrainLogWriter {
    log: csv::Writer<File>,
    trace: csv::Writer<File>,
}

impl TrainLogWriter {
    /// Creates `train_log.csv` and `residual_trace.csv` in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        let mut log = writer(&dir.join("train_log.csv"))?;
        log.write_record(TRAIN_LOG_HEADER)?;
        log.flush()?;
        let mut trace = writer(&dir.join("residual_trace.csv"))?;
        trace.write_record(["epoch", "eps_run_norm", "eps_T_norm", "eps_q_norm", "estimate"])?;
        trace.flush()?;
        Ok(Self { log, trace })
    }

    pub fn push(&mut self, r: &EpochRecord) -> Result<()> {
        self.log.write_record(train_log_row(r))?;
        self.log.flush()?;
        self.trace.write_record([
            r.epoch.to_string(),
            fmt_f64(r.eps_run_norm),
            fmt_f64(r.eps_t_norm),
            fmt_f64(r.eps_q_norm),
            fmt_f64(r.estimate),
        ])?;
        self.trace.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    write_json(path, &params.to_checkpoint())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let ck = serde_json::from_reader(File::open(path)?)?;
    ParamSet::from_checkpoint(&ck)
}
