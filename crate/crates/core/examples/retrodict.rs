//! Retrodiction (future record only) against full smoothing at a few times.
//! At t0 the smoother has no past to add, so the two coincide there.

use qsmooth::engine::HybridEngine;
use qsmooth::scenario::{Scenario, ScenarioConfig};
use qsmooth::smoother::{retrodict, smooth_series};
use qsmooth::truth::simulate_truth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::linear_gaussian_preset();
    cfg.quantum.fock_dim = 10;
    cfg.grid.points = 61;
    cfg.time.t_end = 2.0;
    let scenario = Scenario::from_config(&cfg)?;
    let record = simulate_truth(&scenario, 2)?;
    let engine = HybridEngine::new(&scenario)?;
    let stride = 250;
    let smooth = smooth_series(&engine, &record.dy, stride)?;
    let retro = retrodict(&engine, &record.dy, stride)?;
    println!("{:>5} {:>9} {:>11} {:>9}", "t", "x_true", "retrodicted", "smoothed");
    for (r, s) in retro.iter().zip(&smooth.smoothed) {
        println!("{:>5.2} {:>9.4} {:>11.4} {:>9.4}", r.t, record.x_at(r.step)[0], r.x_mean[0], s.x_mean[0]);
    }
    Ok(())
}
