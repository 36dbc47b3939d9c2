//! Two-pass smoothing: `h(x_k, tau) ∝ Re tr[g(x_k, tau) f(x_k, tau)]`.

use nalgebra::{DMatrix, DVector};

use crate::backward::{run_backward_with, EffectField};
use crate::engine::{BlockStack, HybridEngine};
use crate::error::{Error, Result};
use crate::forward::{init_field, predict_step, run_filter, FilterEstimate, HybridDensityField};

/// Imaginary part of `tr[g f]` tolerated relative to the largest real overlap.
const IMAG_RESIDUE_LIMIT: f64 = 1e-8;

/// Smoothed classical density at one time.
#[derive(Clone, Debug)]
pub struct SmoothingDensity {
    pub t: f64,
    pub step: usize,
    /// Density on the grid (`sum h * cellvol = 1`).
    pub h: Vec<f64>,
    pub x_mean: DVector<f64>,
    pub x_cov: DMatrix<f64>,
    /// `log_weight(f) + log_weight(g) + ln <g, f>`: the record log-likelihood, the same at every time.
    pub log_evidence: f64,
}

/// Combines a forward snapshot and an effect snapshot taken at the same time.
pub fn combine(f: &HybridDensityField, g: &EffectField) -> Result<SmoothingDensity> {
    if f.stack.len() != g.stack.len() || f.dim() != g.dim() {
        return Err(Error::InvalidArgument(format!(
            "field shapes differ: {} blocks of {} vs {} blocks of {}",
            f.stack.len(),
            f.dim(),
            g.stack.len(),
            g.dim()
        )));
    }
    if f.step != g.step {
        return Err(Error::InvalidArgument(format!("snapshots are at different times ({} vs {})", f.t, g.t)));
    }
    let (overlap, worst_im) = BlockStack::pairing(&g.stack, &f.stack);
    let vol = f.grid.cell_volume();
    let total: f64 = overlap.iter().sum::<f64>() * vol;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateSmoothing { t: f.t, overlap: total });
    }
    let scale = overlap.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if worst_im > IMAG_RESIDUE_LIMIT * scale {
        return Err(Error::NumericalInstability(format!(
            "tr[g f] has imaginary part {worst_im:e} at t={} (largest real part {scale:e})",
            f.t
        )));
    }
    let h: Vec<f64> = overlap.iter().map(|v| v / total).collect();
    let (x_mean, x_cov) = f.grid.moments(&h);
    Ok(SmoothingDensity {
        t: f.t,
        step: f.step,
        h,
        x_mean,
        x_cov,
        log_evidence: f.log_weight + g.log_weight + total.ln(),
    })
}

/// Output of [`smooth_series`].
#[derive(Clone, Debug)]
pub struct SmoothingRun {
    /// Filter estimates at every step `t_0 ..= t_N`.
    pub filtered: Vec<FilterEstimate>,
    /// Smoothed densities at the snapshot steps, increasing in time.
    pub smoothed: Vec<SmoothingDensity>,
}

/// Forward pass keeping snapshots every `stride` steps, then the effect pass
/// combining with each stored snapshot as it passes (and dropping it).
pub fn smooth_series(engine: &HybridEngine, dy: &[Vec<f64>], stride: usize) -> Result<SmoothingRun> {
    let run = run_filter(engine, dy, Some(stride))?;
    let smoothed = combine_with_effect(engine, dy, stride, run.snapshots)?;
    Ok(SmoothingRun { filtered: run.estimates, smoothed })
}

/// Retrodiction: the effect of the record combined with the measurement-free
/// prior field, i.e. smoothing with an empty past.
pub fn retrodict(engine: &HybridEngine, dy: &[Vec<f64>], stride: usize) -> Result<Vec<SmoothingDensity>> {
    let keep = crate::forward::snapshot_steps(dy.len(), stride);
    let mut field = init_field(engine)?;
    let mut snapshots = Vec::with_capacity(keep.len());
    let mut next = 0;
    for step in 0..=dy.len() {
        if next < keep.len() && keep[next] == step {
            snapshots.push(field.clone());
            next += 1;
        }
        if step < dy.len() {
            predict_step(engine, &mut field).map_err(|e| e.at_step(step))?;
        }
    }
    combine_with_effect(engine, dy, stride, snapshots)
}

fn combine_with_effect(
    engine: &HybridEngine,
    dy: &[Vec<f64>],
    stride: usize,
    mut snapshots: Vec<HybridDensityField>,
) -> Result<Vec<SmoothingDensity>> {
    let mut out = Vec::with_capacity(snapshots.len());
    run_backward_with(engine, dy, stride, |g| {
        let f = snapshots
            .pop()
            .ok_or_else(|| Error::InvalidArgument("fewer forward snapshots than effect snapshots".into()))?;
        out.push(combine(&f, g)?);
        Ok(())
    })?;
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::init_effect;
    use crate::classical::{ClassicalGrid, ClassicalModel};
    use crate::linalg::C64;
    use crate::operators::{build_fock_operators, coherent_state, driven_oscillator, pure_density, MeasurementModel, QuantumModel};
    use crate::scenario::{PropagatorKind, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn engine(steps: usize) -> HybridEngine {
        let fock = build_fock_operators(6, 1.0, 1.0).unwrap();
        let model = QuantumModel::new(6, driven_oscillator(&fock, 1.0, 1.0, 1), vec![], 1.0).unwrap();
        let meas = MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, 0.5)).unwrap();
        let classical = ClassicalModel::ornstein_uhlenbeck(0.2, 0.5, 0.0, 0.2).unwrap();
        let grid = ClassicalGrid::uniform_1d(-3.0, 3.0, 41).unwrap();
        let rho0 = pure_density(&coherent_state(6, C64::new(0.0, 0.0)));
        HybridEngine::from_parts(
            model,
            meas,
            classical,
            grid,
            TimeGrid { t0: 0.0, dt: 0.01, steps },
            rho0,
            PropagatorKind::Auto,
        )
        .unwrap()
    }

    fn record(n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n).map(|_| vec![rng.gen_range(-0.1..0.1)]).collect()
    }

    #[test]
    fn identity_effect_reproduces_filter_marginal() {
        let e = engine(0);
        let f = init_field(&e).unwrap();
        let g = init_effect(&e, 0);
        let s = combine(&f, &g).unwrap();
        for (a, b) in s.h.iter().zip(f.marginal()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_forward_field_pins_the_smoother() {
        let e = engine(0);
        let mut f = init_field(&e).unwrap();
        for k in 0..f.stack.len() {
            if k != 17 {
                f.stack.block_mut(k).fill(C64::new(0.0, 0.0));
            }
        }
        let mut g = init_effect(&e, 0);
        g.stack.block_mut(17)[0] = C64::new(5.0, 0.0);
        let s = combine(&f, &g).unwrap();
        let vol = f.grid.cell_volume();
        assert!((s.h[17] * vol - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_is_degenerate() {
        let e = engine(0);
        let f = init_field(&e).unwrap();
        let mut g = init_effect(&e, 0);
        g.stack.scale(0.0);
        assert!(matches!(combine(&f, &g), Err(Error::DegenerateSmoothing { .. })));
    }

    #[test]
    fn series_ends_on_the_filter_and_conserves_evidence() {
        let dy = record(60);
        let e = engine(60);
        let run = smooth_series(&e, &dy, 7).unwrap();
        assert_eq!(run.smoothed.len(), 10);
        let last = run.smoothed.last().unwrap();
        for (a, b) in last.h.iter().zip(&run.filtered.last().unwrap().p_x) {
            assert!((a - b).abs() < 1e-12);
        }
        let ll = run.filtered.last().unwrap().log_likelihood;
        let vol = e.grid.cell_volume();
        for s in &run.smoothed {
            assert!((s.log_evidence - ll).abs() < 1e-9);
            assert!((s.h.iter().sum::<f64>() * vol - 1.0).abs() < 1e-12);
            assert!(s.h.iter().all(|&v| v >= -1e-12));
        }
    }

    #[test]
    fn retrodiction_at_t_is_the_propagated_prior() {
        let dy = record(30);
        let e = engine(30);
        let retro = retrodict(&e, &dy, 10).unwrap();
        let mut prior = init_field(&e).unwrap();
        for _ in 0..30 {
            predict_step(&e, &mut prior).unwrap();
        }
        for (a, b) in retro.last().unwrap().h.iter().zip(prior.marginal()) {
            assert!((a - b).abs() < 1e-12);
        }
        // with the whole record in the future, retrodiction at t0 equals smoothing at t0
        let smooth = smooth_series(&e, &dy, 10).unwrap();
        for (a, b) in retro[0].h.iter().zip(&smooth.smoothed[0].h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
