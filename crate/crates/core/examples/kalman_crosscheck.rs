//! Grid filter and smoother against the Kalman-Bucy and two-filter references on
//! the linear-Gaussian preset (oscillator driven by an OU force).
//!
//!     cargo run --release --example kalman_crosscheck -- [t_end] [fock_dim] [grid_points]

use std::time::Instant;

use qsmooth::engine::HybridEngine;
use qsmooth::kalman::{derive_lg_model, kalman_smoother};
use qsmooth::scenario::{Scenario, ScenarioConfig};
use qsmooth::smoother::smooth_series;
use qsmooth::truth::simulate_truth;

fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::linear_gaussian_preset();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Some(t) = args.first() {
        cfg.time.t_end = t.parse()?;
    }
    if let Some(d) = args.get(1) {
        cfg.quantum.fock_dim = d.parse()?;
    }
    if let Some(k) = args.get(2) {
        cfg.grid.points = k.parse()?;
    }
    let scenario = Scenario::from_config(&cfg)?;
    let clock = Instant::now();
    let record = simulate_truth(&scenario, scenario.seed)?;
    println!("truth: {} steps in {:.1?}", record.steps(), clock.elapsed());

    let clock = Instant::now();
    let engine = HybridEngine::new(&scenario)?;
    let grid = smooth_series(&engine, &record.dy, 50)?;
    println!("grid filter + smoother in {:.1?}", clock.elapsed());

    let model = derive_lg_model(&scenario)?;
    let kalman = kalman_smoother(&model, scenario.time.t0, scenario.time.dt, &record.dy)?;

    let fm: Vec<f64> = grid.filtered.iter().map(|e| e.x_mean[0]).collect();
    let fv: Vec<f64> = grid.filtered.iter().map(|e| e.x_cov[(0, 0)]).collect();
    let km: Vec<f64> = kalman.filtered.iter().map(|e| e.classical().0[0]).collect();
    let kv: Vec<f64> = kalman.filtered.iter().map(|e| e.classical().1[(0, 0)]).collect();
    println!("filter   mean rel-RMS {:.4}  variance rel-RMS {:.4}", rel_rms(&fm, &km), rel_rms(&fv, &kv));

    let sm: Vec<f64> = grid.smoothed.iter().map(|s| s.x_mean[0]).collect();
    let sv: Vec<f64> = grid.smoothed.iter().map(|s| s.x_cov[(0, 0)]).collect();
    let mm: Vec<f64> = grid.smoothed.iter().map(|s| kalman.smoothed[s.step].classical().0[0]).collect();
    let mv: Vec<f64> = grid.smoothed.iter().map(|s| kalman.smoothed[s.step].classical().1[(0, 0)]).collect();
    println!("smoother mean rel-RMS {:.4}  variance rel-RMS {:.4}", rel_rms(&sm, &mm), rel_rms(&sv, &mv));
    println!("boundary warnings: {}", engine.boundary_warnings());
    // error profile over time, in tenths of the interval
    let n = fm.len();
    for c in 0..10 {
        let r = c * n / 10..(c + 1) * n / 10;
        let err: f64 = r.clone().map(|i| (fm[i] - km[i]).powi(2)).sum::<f64>() / r.len() as f64;
        let sig: f64 = r.clone().map(|i| km[i].powi(2)).sum::<f64>() / r.len() as f64;
        println!("  decile {c}: filter rms err {:.4}  rms signal {:.4}", err.sqrt(), sig.sqrt());
    }
    Ok(())
}
