//! Hybrid filter on a simulated record: the conditional force density and the
//! conditional oscillator state, next to the truth.

use qsmooth::engine::HybridEngine;
use qsmooth::forward::run_filter;
use qsmooth::linalg::trace_product;
use qsmooth::operators::build_fock_operators;
use qsmooth::scenario::{Scenario, ScenarioConfig};
use qsmooth::truth::simulate_truth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::linear_gaussian_preset();
    cfg.quantum.fock_dim = 12;
    cfg.grid.points = 81;
    cfg.time.t_end = 4.0;
    let scenario = Scenario::from_config(&cfg)?;
    let record = simulate_truth(&scenario, 5)?;
    let engine = HybridEngine::new(&scenario)?;
    let run = run_filter(&engine, &record.dy, None)?;

    let fock = build_fock_operators(cfg.quantum.fock_dim, cfg.quantum.omega, cfg.quantum.hbar)?;
    println!("{:>6} {:>9} {:>9} {:>8} {:>8} {:>10}", "t", "x_true", "x_hat", "sd", "<q>", "loglik");
    for e in run.estimates.iter().step_by(250).skip(1) {
        let q = trace_product(&fock.q, &e.rho_cond).re;
        println!(
            "{:>6.2} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>10.3}",
            e.t,
            record.x_at(e.step)[0],
            e.x_mean[0],
            e.x_cov[(0, 0)].sqrt(),
            q,
            e.log_likelihood
        );
    }
    println!("boundary folds: {}", engine.boundary_warnings());
    Ok(())
}
