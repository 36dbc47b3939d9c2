//! Filtered against smoothed force estimates on one record. The smoother uses
//! the whole record, so away from the final time its error should be smaller.

use qsmooth::engine::HybridEngine;
use qsmooth::scenario::{Scenario, ScenarioConfig};
use qsmooth::smoother::smooth_series;
use qsmooth::truth::simulate_truth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::linear_gaussian_preset();
    cfg.quantum.fock_dim = 12;
    cfg.grid.points = 81;
    cfg.time.t_end = 4.0;
    let scenario = Scenario::from_config(&cfg)?;
    let record = simulate_truth(&scenario, 11)?;
    let engine = HybridEngine::new(&scenario)?;
    let run = smooth_series(&engine, &record.dy, 100)?;

    let (mut ef, mut es) = (0.0, 0.0);
    println!("{:>5} {:>9} {:>9} {:>8} {:>9} {:>8}", "t", "x_true", "filter", "sd", "smooth", "sd");
    for s in &run.smoothed {
        let f = &run.filtered[s.step];
        let x = record.x_at(s.step)[0];
        ef += (f.x_mean[0] - x).powi(2);
        es += (s.x_mean[0] - x).powi(2);
        println!(
            "{:>5.2} {:>9.4} {:>9.4} {:>8.4} {:>9.4} {:>8.4}",
            s.t,
            x,
            f.x_mean[0],
            f.x_cov[(0, 0)].sqrt(),
            s.x_mean[0],
            s.x_cov[(0, 0)].sqrt()
        );
    }
    let n = run.smoothed.len() as f64;
    println!("rms error: filter {:.4}, smoother {:.4}", (ef / n).sqrt(), (es / n).sqrt());
    println!("log evidence {:.4} (same at every time)", run.smoothed[0].log_evidence);
    Ok(())
}
