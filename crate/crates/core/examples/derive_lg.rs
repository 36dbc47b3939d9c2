//! The linear-Gaussian model behind the oscillator preset, its stationary
//! filter covariance, and how the back-action noise on p scales with hbar.

use qsmooth::kalman::{derive_lg_model, kalman_bucy_forward, riccati_residual};
use qsmooth::scenario::{Scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = Scenario::from_config(&ScenarioConfig::linear_gaussian_preset())?;
    let model = derive_lg_model(&scenario)?;
    println!("state (q, p, x)\nF = {}N = {}H = {}R = {}", model.f, model.n, model.h, model.r);

    // run the Riccati flow to stationarity with zero increments (the covariance ignores them)
    let dt = 1e-3;
    let flow = kalman_bucy_forward(&model, 0.0, dt, &vec![vec![0.0]; 60_000])?;
    let p = &flow.last().expect("non-empty").cov;
    println!("stationary filter covariance (residual {:.2e}):{p}", riccati_residual(&model, p));

    for hbar in [1.0, 0.1, 0.01] {
        let mut cfg = ScenarioConfig::linear_gaussian_preset();
        cfg.quantum.hbar = hbar;
        let m = derive_lg_model(&Scenario::from_config(&cfg)?)?;
        println!("hbar={hbar:<5} N[p,p]={:.3e}", m.n[(1, 1)]);
    }
    Ok(())
}
