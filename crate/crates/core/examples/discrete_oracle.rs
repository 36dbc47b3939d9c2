//! The exact path-sum oracle on a two-level, two-point instance, and the
//! convergence of the continuous pipeline towards its continuum limit.

use qsmooth::oracle::{
    brute_force_smooth, enumerate_effect, enumerate_forward, ladder_engine, oracle_smooth, pairing, run_ladder,
    DiscreteScenario, LadderOptions,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kicks = LadderOptions::default().kicks;
    let ds = DiscreteScenario::from_engine(&ladder_engine(0.05, kicks.len())?)?;
    let f = enumerate_forward(&ds, &kicks)?;
    let e = enumerate_effect(&ds, &kicks)?;
    println!("pairing <E_tau, f_tau> at each tau (constant):");
    for (tau, (e, f)) in e.iter().zip(&f).enumerate() {
        println!("  tau={tau}: {:.15}", pairing(e, f));
    }
    let smooth = oracle_smooth(&ds, &kicks)?;
    let brute = brute_force_smooth(&ds, &kicks)?;
    println!("smoothed P(x = -2), P(x = +2) from the fields and from whole histories:");
    for (s, b) in smooth.iter().zip(&brute) {
        println!("  [{:.12}, {:.12}]  [{:.12}, {:.12}]", s[0], s[1], b[0], b[1]);
    }

    let report = run_ladder(&LadderOptions::default())?;
    println!("dt ladder against the continuum oracle:");
    for (dt, err) in report.dts.iter().zip(&report.errors) {
        println!("  dt={dt:<8} error {err:.4e}");
    }
    println!("observed order {:.3}", report.order);
    Ok(())
}
