//! Monte-Carlo ensembles: independent truth records, every requested
//! estimator on each, and time-resolved squared-error statistics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::{Estimators, Method};
use crate::scenario::Scenario;
use crate::truth::{fmt_f64, simulate_truth};

pub const SUMMARY_FORMAT: &str = "qsmooth-ensemble/v1";
pub const RUNS_FORMAT: &str = "qsmooth-ensemble-runs/v1";

/// Errors of one estimator over one record, at its output times.
#[derive(Clone, Debug)]
pub struct MethodErrors {
    pub method: Method,
    pub t: Vec<f64>,
    /// `|x_hat - x_true|^2` summed over classical components.
    pub sq_err: Vec<f64>,
    /// Trace of the reported covariance.
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub result: std::result::Result<Vec<MethodErrors>, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub t: f64,
    /// Successful runs contributing.
    pub n: usize,
    pub mse: f64,
    /// Standard error of `mse`.
    pub se: f64,
    pub mean_variance: f64,
}

#[derive(Clone, Debug)]
pub struct EnsembleReport {
    pub scenario_hash: String,
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl EnsembleReport {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.result.is_err()).count()
    }

    /// More than a tenth of the runs failed.
    pub fn mostly_failed(&self) -> bool {
        10 * self.failed() > self.runs.len()
    }

    /// Summary row of `method` closest to time `t`.
    pub fn at(&self, method: Method, t: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .filter(|r| r.method == method)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    /// Per-run squared errors of `method` at the output time closest to `t`.
    pub fn squared_errors_at(&self, method: Method, t: f64) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .filter_map(|errs| errs.iter().find(|e| e.method == method))
            .filter_map(|e| {
                let i = (0..e.t.len()).min_by(|&a, &b| (e.t[a] - t).abs().total_cmp(&(e.t[b] - t).abs()))?;
                Some(e.sq_err[i])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleOptions {
    pub runs: usize,
    pub seed0: u64,
    pub methods: Vec<Method>,
    pub parallelism: usize,
    pub stride: Option<usize>,
}

fn one_run(scenario: &Scenario, estimators: &Estimators, methods: &[Method], seed: u64) -> Result<Vec<MethodErrors>> {
    let record = simulate_truth(scenario, seed)?;
    let tables = estimators.run(&record, methods)?;
    Ok(tables
        .into_iter()
        .map(|(method, table, _)| {
            let mut errs = MethodErrors { method, t: vec![], sq_err: vec![], variance: vec![] };
            for row in &table.rows {
                let step = ((row.t - record.t0) / record.dt).round() as usize;
                let truth = record.x_at(step);
                errs.t.push(row.t);
                errs.sq_err.push(row.mean.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum());
                errs.variance.push((0..row.mean.len()).map(|i| row.variance(i)).sum());
            }
            errs
        })
        .collect())
}

/// Runs seeds `seed0 .. seed0 + runs` on a pool of `parallelism` workers.
/// A failing run is recorded in its outcome; the call itself only fails on
/// setup errors.
pub fn run_ensemble(scenario: &Scenario, opts: &EnsembleOptions) -> Result<EnsembleReport> {
    if opts.runs < 2 {
        return Err(Error::InvalidArgument(format!("an ensemble needs at least 2 runs, got {}", opts.runs)));
    }
    let estimators = Estimators::new(scenario, &opts.methods, opts.stride)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        (0..opts.runs)
            .into_par_iter()
            .map(|run| {
                let seed = opts.seed0.wrapping_add(run as u64);
                let result = one_run(scenario, &estimators, &opts.methods, seed).map_err(|e| {
                    log::warn!("run {run} (seed {seed}) failed: {e}");
                    e.to_string()
                });
                RunOutcome { run, seed, result }
            })
            .collect()
    });
    let summary = summarize(&runs, &opts.methods);
    Ok(EnsembleReport { scenario_hash: scenario.id.clone(), runs, summary })
}

fn summarize(runs: &[RunOutcome], methods: &[Method]) -> Vec<SummaryRow> {
    let ok: Vec<&Vec<MethodErrors>> = runs.iter().filter_map(|r| r.result.as_ref().ok()).collect();
    let mut out = Vec::new();
    for &method in methods {
        let per_run: Vec<&MethodErrors> = ok.iter().filter_map(|errs| errs.iter().find(|e| e.method == method)).collect();
        let Some(first) = per_run.first() else { continue };
        let n = per_run.len();
        for (i, &t) in first.t.iter().enumerate() {
            let mse = per_run.iter().map(|e| e.sq_err[i]).sum::<f64>() / n as f64;
            let var = per_run.iter().map(|e| (e.sq_err[i] - mse).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            let mean_variance = per_run.iter().map(|e| e.variance[i]).sum::<f64>() / n as f64;
            out.push(SummaryRow { method, t, n, mse, se: (var / n as f64).sqrt(), mean_variance });
        }
    }
    out
}

/// `method,t,n,mse,se,mean_variance`.
pub fn write_summary(path: &Path, report: &EnsembleReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "# {SUMMARY_FORMAT} scenario={} runs={} failed={}",
        report.scenario_hash,
        report.runs.len(),
        report.failed()
    )?;
    writeln!(out, "method,t,n,mse,se,mean_variance")?;
    for r in &report.summary {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            fmt_f64(r.t),
            r.n,
            fmt_f64(r.mse),
            fmt_f64(r.se),
            fmt_f64(r.mean_variance)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// One row per run and method: `run,seed,status,method,mse_time_avg,sq_err_final,error`.
/// A failed run gets a single row with an empty method and its error message.
pub fn write_runs(path: &Path, report: &EnsembleReport) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut raw = std::io::BufWriter::new(file);
    writeln!(raw, "# {RUNS_FORMAT} scenario={}", report.scenario_hash)?;
    let mut w = csv::Writer::from_writer(raw);
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["run", "seed", "status", "method", "mse_time_avg", "sq_err_final", "error"]).map_err(io_err)?;
    for r in &report.runs {
        match &r.result {
            Ok(errs) => {
                for e in errs {
                    let avg = e.sq_err.iter().sum::<f64>() / e.sq_err.len().max(1) as f64;
                    let last = e.sq_err.last().copied().unwrap_or(f64::NAN);
                    w.write_record([
                        r.run.to_string(),
                        r.seed.to_string(),
                        "ok".into(),
                        e.method.to_string(),
                        fmt_f64(avg),
                        fmt_f64(last),
                        String::new(),
                    ])
                    .map_err(io_err)?;
                }
            }
            Err(msg) => {
                w.write_record([
                    r.run.to_string(),
                    r.seed.to_string(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ])
                .map_err(io_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
