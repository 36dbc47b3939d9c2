//! Filter up to mid-interval, then predict without measurements and compare
//! with the Kalman-Bucy prediction from the same point.

use qsmooth::engine::HybridEngine;
use qsmooth::forward::{init_field, predict_ahead, run_filter_from};
use qsmooth::kalman::{derive_lg_model, kalman_bucy_forward};
use qsmooth::scenario::{Scenario, ScenarioConfig};
use qsmooth::truth::simulate_truth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::linear_gaussian_preset();
    cfg.quantum.fock_dim = 12;
    cfg.grid.points = 81;
    cfg.time.t_end = 4.0;
    let scenario = Scenario::from_config(&cfg)?;
    let record = simulate_truth(&scenario, 4)?;
    let engine = HybridEngine::new(&scenario)?;
    let half = record.steps() / 2;

    let mut field = init_field(&engine)?;
    run_filter_from(&engine, &mut field, &record.dy[..half], None)?;
    let ahead = predict_ahead(&engine, &field, 1.0)?;

    // same thing for the Gaussian model: filter, then run on with the readout switched off
    let mut model = derive_lg_model(&scenario)?;
    let filtered = kalman_bucy_forward(&model, scenario.time.t0, record.dt, &record.dy[..half])?;
    let start = filtered.last().expect("at least the prior");
    model.mean0 = start.mean.clone();
    model.cov0 = start.cov.clone();
    model.h.fill(0.0);
    let kalman = kalman_bucy_forward(&model, record.time(half), record.dt, &vec![vec![0.0]; ahead.len() - 1])?;

    println!("{:>5} {:>9} {:>9} {:>9} {:>9}", "t", "grid", "kalman", "grid sd", "kalman sd");
    for (g, k) in ahead.iter().zip(&kalman).step_by(100) {
        let (m, c) = k.classical();
        println!("{:>5.2} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", g.t, g.x_mean[0], m[0], g.x_cov[(0, 0)].sqrt(), c[(0, 0)].sqrt());
    }
    Ok(())
}
