//! A small Monte-Carlo ensemble on a shortened preset: grid filter and smoother
//! next to their Kalman counterparts, MSE against the reported variance.
//!
//!     cargo run --release --example ensemble -- [runs]

use qsmooth::ensemble::{run_ensemble, EnsembleOptions};
use qsmooth::pipeline::Method;
use qsmooth::scenario::{Scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs = std::env::args().nth(1).map_or(Ok(24), |s| s.parse())?;
    let mut cfg = ScenarioConfig::linear_gaussian_preset();
    cfg.quantum.fock_dim = 10;
    cfg.quantum.truth_fock_dim = Some(24);
    cfg.grid.points = 61;
    cfg.time.t_end = 2.0;
    let scenario = Scenario::from_config(&cfg)?;
    let opts = EnsembleOptions {
        runs,
        seed0: 100,
        methods: Method::parse_list("filter,smooth,kalman,kalman-smooth")?,
        parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        stride: Some(100),
    };
    let report = run_ensemble(&scenario, &opts)?;
    println!("{} runs, {} failed", report.runs.len(), report.failed());
    for t in [0.5, 1.0, 1.5, 2.0] {
        println!("t={t}");
        for &m in &opts.methods {
            let r = report.at(m, t).expect("every method has rows");
            println!("  {:>14}: mse {:.4} +- {:.4}, mean variance {:.4}", m.name(), r.mse, r.se, r.mean_variance);
        }
    }
    Ok(())
}
