//! Command-line front end. `run` returns the process exit status:
//! 0 ok, 1 failed check, 2 configuration or input error, 3 numerically
//! degenerate estimate, 4 more than a tenth of the ensemble runs failed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::backward::run_backward_with;
use crate::ensemble::{run_ensemble, write_runs, write_summary, EnsembleOptions};
use crate::error::{Error, Result};
use crate::forward::run_filter;
use crate::io::{write_densities, write_estimates, write_snapshot, Snapshot};
use crate::kalman::derive_lg_model;
use crate::oracle::{run_ladder, tiny_ladder_deviation, LadderOptions};
use crate::pipeline::{Estimators, Method};
use crate::scenario::Scenario;
use crate::truth::{read_record, simulate_truth, write_record};

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;
pub const EXIT_PARTIAL_ENSEMBLE: i32 = 4;

const TINY_TOLERANCE: f64 = 1e-12;

#[derive(Parser, Debug)]
#[command(name = "qsmooth", version, about = "Filtering and smoothing for hybrid quantum-classical systems")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a truth trajectory and its measurement record.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run estimators over a recorded trajectory.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Record CSV; defaults to `<out>/record.csv`.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of filter, smooth, retrodict, kalman, kalman-smooth.
        #[arg(long, default_value = "filter,smooth")]
        methods: String,
        /// Smoother snapshot stride in steps.
        #[arg(long)]
        stride: Option<usize>,
        /// Also write forward and backward field snapshots under `<out>/snapshots`.
        #[arg(long)]
        snapshots: bool,
    },
    /// Monte-Carlo ensemble of independent records.
    Ensemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: usize,
        /// First seed; runs use seed, seed+1, ... (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "filter,smooth,kalman,kalman-smooth")]
        methods: String,
        /// Worker threads (default: all cores).
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Convergence of the pipeline to the exact discrete oracle.
    OracleCheck {
        /// Number of coarse increments (at most 6).
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// One pipeline step per increment, compared with the path-sum oracle at 1e-12.
        #[arg(long)]
        tiny: bool,
        /// Runs the pipeline at a wrong dt so that the check must fail.
        #[arg(long, hide = true)]
        inject_dt_mismatch: bool,
    },
    /// Print the linear-Gaussian model equivalent to a scenario.
    DeriveLg {
        #[arg(long)]
        config: PathBuf,
        /// Also write `<out>/lg_model.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_degenerate() {
        EXIT_DEGENERATE
    } else {
        EXIT_CONFIG
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Estimate { config, record, out, methods, stride, snapshots } => {
            let record = record.unwrap_or_else(|| out.join("record.csv"));
            estimate(&config, &record, &out, &Method::parse_list(&methods)?, stride, snapshots)
        }
        Command::Ensemble { config, out, runs, seed, methods, parallelism, stride } => {
            let scenario = Scenario::from_path(&config)?;
            let opts = EnsembleOptions {
                runs,
                seed0: seed.unwrap_or(scenario.seed),
                methods: Method::parse_list(&methods)?,
                parallelism: parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
                stride,
            };
            ensemble(&scenario, &out, &opts)
        }
        Command::OracleCheck { steps, tiny, inject_dt_mismatch } => oracle_check(steps, tiny, inject_dt_mismatch),
        Command::DeriveLg { config, out } => derive_lg(&config, out.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let scenario = Scenario::from_path(config)?;
    create_dir(out)?;
    let record = simulate_truth(&scenario, seed.unwrap_or(scenario.seed))?;
    let path = out.join("record.csv");
    write_record(&record, &path)?;
    let n = record.dy.len().max(1) as f64;
    let rms: Vec<String> = (0..record.dy.first().map_or(0, Vec::len))
        .map(|c| format!("{:.6e}", (record.dy.iter().map(|d| d[c] * d[c]).sum::<f64>() / n).sqrt()))
        .collect();
    println!("wrote {} ({} steps, rms dy [{}], scenario {})", path.display(), record.steps(), rms.join(", "), record.scenario_id);
    Ok(0)
}

fn estimate(config: &Path, record: &Path, out: &Path, methods: &[Method], stride: Option<usize>, snapshots: bool) -> Result<i32> {
    let scenario = Scenario::from_path(config)?;
    let record = read_record(record)?;
    record.check_against(&scenario)?;
    create_dir(out)?;
    let estimators = Estimators::new(&scenario, methods, stride)?;
    for (method, table, densities) in estimators.run(&record, methods)? {
        let path = out.join(format!("estimates_{method}.csv"));
        write_estimates(&path, &table)?;
        println!("wrote {} ({} rows)", path.display(), table.rows.len());
        if let (Some(rows), Some(engine)) = (densities, estimators.engine.as_ref()) {
            let path = out.join(format!("density_{method}.csv"));
            write_densities(&path, &scenario.id, method.name(), &engine.grid, &rows)?;
        }
    }
    if snapshots {
        let dir = out.join("snapshots");
        create_dir(&dir)?;
        let engine = match estimators.engine {
            Some(e) => e,
            None => crate::engine::HybridEngine::new(&scenario)?,
        };
        let fwd = run_filter(&engine, &record.dy, Some(estimators.stride))?;
        for f in &fwd.snapshots {
            let snap = Snapshot::forward(&scenario.id, f);
            write_snapshot(&snap.file_name(&dir), &snap)?;
        }
        run_backward_with(&engine, &record.dy, estimators.stride, |g| {
            let snap = Snapshot::backward(&scenario.id, g);
            write_snapshot(&snap.file_name(&dir), &snap)
        })?;
        println!("wrote {} snapshot pairs to {}", fwd.snapshots.len(), dir.display());
    }
    Ok(0)
}

fn ensemble(scenario: &Scenario, out: &Path, opts: &EnsembleOptions) -> Result<i32> {
    create_dir(out)?;
    let report = run_ensemble(scenario, opts)?;
    write_summary(&out.join("ensemble_summary.csv"), &report)?;
    write_runs(&out.join("ensemble_runs.csv"), &report)?;
    let mid = scenario.time.t0 + 0.5 * (scenario.time.t_end() - scenario.time.t0);
    for &m in &opts.methods {
        if let Some(r) = report.at(m, mid) {
            println!("{m:>14}: mse {:.5} +- {:.5} at t={} (mean reported variance {:.5})", r.mse, r.se, r.t, r.mean_variance);
        }
    }
    println!("{} of {} runs failed", report.failed(), report.runs.len());
    Ok(if report.mostly_failed() { EXIT_PARTIAL_ENSEMBLE } else { 0 })
}

fn oracle_check(steps: usize, tiny: bool, inject_dt_mismatch: bool) -> Result<i32> {
    let base = LadderOptions::default();
    let kicks: Vec<Vec<f64>> = (0..steps).map(|i| base.kicks[i % base.kicks.len()].clone()).collect();
    if tiny {
        let dt = 0.05;
        let dt_pipeline = if inject_dt_mismatch { 1.1 * dt } else { dt };
        let dev = tiny_ladder_deviation(&kicks, dt, dt_pipeline)?;
        let ok = dev < TINY_TOLERANCE;
        println!("tiny ladder: {steps} steps, max deviation {dev:e} (tolerance {TINY_TOLERANCE:e}): {}", if ok { "PASS" } else { "FAIL" });
        return Ok(if ok { 0 } else { EXIT_CHECK_FAILED });
    }
    let opts = LadderOptions { kicks, dt_scale: if inject_dt_mismatch { 1.1 } else { 1.0 }, ..base };
    let report = run_ladder(&opts)?;
    for (dt, err) in report.dts.iter().zip(&report.errors) {
        println!("dt {dt:<10} error {err:.6e}");
    }
    let ok = report.passes();
    println!("observed order {:.3} (expected 1 +- 0.25): {}", report.order, if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn derive_lg(config: &Path, out: Option<&Path>) -> Result<i32> {
    let scenario = Scenario::from_path(config)?;
    let model = derive_lg_model(&scenario)?;
    let doc = json!({
        "scenario_hash": scenario.id,
        "state": ["q", "p", "x_0"],
        "F": matrix_rows(&model.f),
        "b": model.b.iter().copied().collect::<Vec<f64>>(),
        "N": matrix_rows(&model.n),
        "H": matrix_rows(&model.h),
        "R": matrix_rows(&model.r),
        "mean0": model.mean0.iter().copied().collect::<Vec<f64>>(),
        "cov0": matrix_rows(&model.cov0),
    });
    let text = serde_json::to_string_pretty(&doc).expect("model serializes") + "\n";
    print!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        std::fs::write(dir.join("lg_model.json"), text)?;
    }
    Ok(0)
}
