//! Forward hybrid filter: the unnormalized hybrid density `f(x_k)` advanced by a
//! measurement update followed by quantum dynamics and classical mixing, with the
//! normalization kept in a log-weight ledger.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::classical::ClassicalGrid;
use crate::engine::{BlockStack, HybridEngine};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eigen, Operator, C64, ZERO};

/// Hybrid density on the grid: one `d x d` block per grid point, scaled so the
/// total trace `sum_k tr f_k * cellvol` is 1 after each update.
#[derive(Clone, Debug)]
pub struct HybridDensityField {
    pub grid: Arc<ClassicalGrid>,
    pub stack: BlockStack,
    /// Accumulated log of the normalizations removed so far (the log-likelihood).
    pub log_weight: f64,
    pub t: f64,
    /// Number of steps taken from `t0`.
    pub step: usize,
}

impl HybridDensityField {
    pub fn dim(&self) -> usize {
        self.stack.dim
    }

    /// `sum_k tr f_k * cellvol`.
    pub fn total_trace(&self) -> f64 {
        self.stack.traces().iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Rescales to unit total trace and returns the log of the removed factor.
    pub fn normalize(&mut self) -> f64 {
        let s = self.total_trace();
        self.stack.scale(1.0 / s);
        let ln = s.ln();
        self.log_weight += ln;
        ln
    }

    /// Classical marginal `p(x_k) = tr f_k / total`.
    pub fn marginal(&self) -> Vec<f64> {
        let total = self.total_trace();
        self.stack.traces().into_iter().map(|v| v / total).collect()
    }

    /// Quantum marginal `sum_k f_k cellvol`, normalized to unit trace.
    pub fn quantum_marginal(&self) -> Operator {
        let d = self.dim();
        let mut acc = vec![ZERO; d * d];
        for k in 0..self.stack.len() {
            for (a, v) in acc.iter_mut().zip(self.stack.block(k)) {
                *a += v;
            }
        }
        let rho = Operator::from_column_slice(d, d, &acc);
        let tr: C64 = rho.trace();
        rho / tr
    }

    /// Smallest `lambda_min(f_k) / tr f_k` over blocks with nonzero trace.
    pub fn worst_relative_eigenvalue(&self) -> f64 {
        let traces = self.stack.traces();
        let scale = traces.iter().fold(0.0_f64, |m, t| m.max(t.abs()));
        (0..self.stack.len())
            .map(|k| hermitian_eigen(&self.stack.operator(k)).0[0] / scale.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn estimate(&self) -> FilterEstimate {
        let p_x = self.marginal();
        let (x_mean, x_cov) = self.grid.moments(&p_x);
        FilterEstimate {
            t: self.t,
            step: self.step,
            p_x,
            x_mean,
            x_cov,
            rho_cond: self.quantum_marginal(),
            log_likelihood: self.log_weight,
        }
    }
}

/// Filtered summary at one time.
#[derive(Clone, Debug)]
pub struct FilterEstimate {
    pub t: f64,
    pub step: usize,
    /// Classical marginal density on the grid (`sum p_x * cellvol = 1`).
    pub p_x: Vec<f64>,
    pub x_mean: DVector<f64>,
    pub x_cov: DMatrix<f64>,
    /// Unit-trace quantum marginal.
    pub rho_cond: Operator,
    pub log_likelihood: f64,
}

/// `rho0 * P(x_k)` from the prior, normalized.
pub fn init_field(engine: &HybridEngine) -> Result<HybridDensityField> {
    let grid = engine.grid.clone();
    let (p, off_grid) = grid.gaussian_density(&engine.classical.initial_mean, &engine.classical.initial_cov)?;
    if off_grid > 1e-6 {
        return Err(Error::InvalidGrid(format!(
            "prior places {off_grid:e} of its mass outside the grid (limit 1e-6)"
        )));
    }
    let blocks: Vec<Operator> = p.iter().map(|&w| &engine.rho0 * C64::new(w, 0.0)).collect();
    let mut field = HybridDensityField {
        grid,
        stack: BlockStack::from_blocks(&blocks),
        log_weight: 0.0,
        t: engine.time.t0,
        step: 0,
    };
    field.normalize();
    field.log_weight = 0.0;
    Ok(field)
}

/// Quantum Bayes update `f_k <- M(dy) f_k M(dy)^dagger`, then renormalization.
pub fn update_step(engine: &HybridEngine, field: &mut HybridDensityField, dy: &[f64]) -> Result<()> {
    let kraus = engine.kraus(dy)?;
    engine.apply_kraus(&mut field.stack, &kraus, false);
    field.stack.hermitize();
    let s = field.total_trace();
    if !(s > 1e-300) || !s.is_finite() {
        return Err(Error::DegenerateUpdate { step: field.step, trace: s });
    }
    field.normalize();
    Ok(())
}

/// Quantum dynamics at each grid point, then classical mixing by the transition kernel.
pub fn predict_step(engine: &HybridEngine, field: &mut HybridDensityField) -> Result<()> {
    let kernel = engine.kernel_at(field.step)?;
    engine.apply_dynamics(&mut field.stack, false);
    field.stack = engine.mix(&field.stack, &kernel, false);
    if let Some(k) = field.stack.first_non_finite() {
        return Err(Error::NumericalOverflow(format!(
            "non-finite block at grid point {k} after prediction at step {}",
            field.step
        )));
    }
    field.step += 1;
    field.t = engine.time.time(field.step);
    Ok(())
}

/// One full filter step for the increment over `[t_i, t_{i+1})`: [`update_step`]
/// then [`predict_step`], with the two quantum maps applied together.
pub fn filter_step(engine: &HybridEngine, field: &mut HybridDensityField, dy: &[f64]) -> Result<()> {
    let kraus = engine.kraus(dy)?;
    let kernel = engine.kernel_at(field.step)?;
    engine.apply_measured_dynamics(&mut field.stack, &kraus, false);
    field.stack.hermitize();
    // the dynamics preserve trace, so the update's normalization can be taken here
    let s = field.total_trace();
    if !(s > 1e-300) || !s.is_finite() {
        return Err(Error::DegenerateUpdate { step: field.step, trace: s });
    }
    field.normalize();
    field.stack = engine.mix(&field.stack, &kernel, false);
    if let Some(k) = field.stack.first_non_finite() {
        return Err(Error::NumericalOverflow(format!(
            "non-finite block at grid point {k} after prediction at step {}",
            field.step
        )));
    }
    field.step += 1;
    field.t = engine.time.time(field.step);
    Ok(())
}

/// Output of [`run_filter`].
#[derive(Clone, Debug)]
pub struct FilterRun {
    /// Estimates at `t_0 ..= t_N` (the first one is the prior).
    pub estimates: Vec<FilterEstimate>,
    /// Field snapshots at [`snapshot_steps`], when requested.
    pub snapshots: Vec<HybridDensityField>,
}

/// Steps at which snapshots are kept: multiples of `stride` plus the final step.
pub fn snapshot_steps(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut out: Vec<usize> = (0..=steps).step_by(stride).collect();
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

/// Filters the increments `dy[i]` (step `i` covers `[t_i, t_{i+1})`).
/// With `stride = Some(s)` the unnormalized field is kept every `s` steps.
pub fn run_filter(engine: &HybridEngine, dy: &[Vec<f64>], stride: Option<usize>) -> Result<FilterRun> {
    let mut field = init_field(engine)?;
    run_filter_from(engine, &mut field, dy, stride)
}

/// Like [`run_filter`] but continuing from an existing field.
pub fn run_filter_from(
    engine: &HybridEngine,
    field: &mut HybridDensityField,
    dy: &[Vec<f64>],
    stride: Option<usize>,
) -> Result<FilterRun> {
    let start = field.step;
    let keep = stride.map(|s| snapshot_steps(dy.len(), s));
    let mut estimates = Vec::with_capacity(dy.len() + 1);
    let mut snapshots = Vec::new();
    let mut next_keep = 0;
    let mut maybe_keep = |field: &HybridDensityField, i: usize, snapshots: &mut Vec<HybridDensityField>| {
        if let Some(k) = &keep {
            if next_keep < k.len() && k[next_keep] == i {
                snapshots.push(field.clone());
                next_keep += 1;
            }
        }
    };
    estimates.push(field.estimate());
    maybe_keep(field, 0, &mut snapshots);
    for (i, d) in dy.iter().enumerate() {
        filter_step(engine, field, d).map_err(|e| e.at_step(start + i))?;
        estimates.push(field.estimate());
        maybe_keep(field, i + 1, &mut snapshots);
    }
    Ok(FilterRun { estimates, snapshots })
}

/// Prediction only (no measurements) for `horizon` time units; the first entry is the current estimate.
pub fn predict_ahead(engine: &HybridEngine, field: &HybridDensityField, horizon: f64) -> Result<Vec<FilterEstimate>> {
    if !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be nonnegative, got {horizon}")));
    }
    let dt = engine.dt();
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(dt) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} is not a multiple of dt={dt}")));
    }
    let mut f = field.clone();
    let mut out = vec![f.estimate()];
    for _ in 0..steps as usize {
        predict_step(engine, &mut f)?;
        out.push(f.estimate());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{ClassicalModel, TransitionKernel};
    use crate::linalg::max_abs;
    use crate::operators::{build_fock_operators, coherent_state, driven_oscillator, MeasurementModel, QuantumModel};
    use crate::scenario::{PropagatorKind, TimeGrid};

    fn oscillator_engine(points: usize, dt: f64, steps: usize, kind: PropagatorKind) -> HybridEngine {
        oscillator_engine_with(points, dt, steps, kind, 0.5)
    }

    fn oscillator_engine_with(points: usize, dt: f64, steps: usize, kind: PropagatorKind, sigma: f64) -> HybridEngine {
        let fock = build_fock_operators(8, 1.0, 1.0).unwrap();
        let model = QuantumModel::new(8, driven_oscillator(&fock, 1.0, 1.0, 1), vec![], 1.0).unwrap();
        let meas = MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, 0.5)).unwrap();
        let classical = ClassicalModel::ornstein_uhlenbeck(0.2, sigma, 0.0, 0.25).unwrap();
        let grid = ClassicalGrid::uniform_1d(-3.0, 3.0, points).unwrap();
        let time = TimeGrid { t0: 0.0, dt, steps };
        let rho0 = crate::operators::pure_density(&coherent_state(8, C64::new(0.0, 0.0)));
        HybridEngine::from_parts(model, meas, classical, grid, time, rho0, kind).unwrap()
    }

    #[test]
    fn init_is_normalized_with_prior_moments() {
        let engine = oscillator_engine(121, 0.01, 10, PropagatorKind::Auto);
        let f = init_field(&engine).unwrap();
        assert!((f.total_trace() - 1.0).abs() < 1e-12);
        assert_eq!(f.log_weight, 0.0);
        let est = f.estimate();
        assert!(est.x_mean[0].abs() < 1e-12);
        assert!((est.x_cov[(0, 0)] - 0.25).abs() < 1e-3);
    }

    #[test]
    fn prior_off_grid_is_rejected() {
        let fock = build_fock_operators(2, 1.0, 1.0).unwrap();
        let model = QuantumModel::new(2, driven_oscillator(&fock, 1.0, 1.0, 1), vec![], 1.0).unwrap();
        let meas = MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let classical = ClassicalModel::ornstein_uhlenbeck(0.2, 0.5, 0.0, 1.0).unwrap();
        let grid = ClassicalGrid::uniform_1d(-2.0, 2.0, 41).unwrap();
        let rho0 = fock.identity.clone() * C64::new(0.5, 0.0);
        let engine = HybridEngine::from_parts(
            model,
            meas,
            classical,
            grid,
            TimeGrid { t0: 0.0, dt: 0.01, steps: 1 },
            rho0,
            PropagatorKind::Auto,
        )
        .unwrap();
        assert!(matches!(init_field(&engine), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn predict_preserves_trace_sum() {
        for kind in [PropagatorKind::Exact, PropagatorKind::Rk4] {
            let engine = oscillator_engine(61, 0.01, 50, kind);
            let mut f = init_field(&engine).unwrap();
            for _ in 0..50 {
                predict_step(&engine, &mut f).unwrap();
            }
            assert!((f.total_trace() - 1.0).abs() < 1e-10, "{kind:?}");
            assert!(f.worst_relative_eigenvalue() > -1e-8);
        }
    }

    #[test]
    fn identity_kernel_and_no_dynamics_leave_field_unchanged() {
        let fock = build_fock_operators(3, 1.0, 1.0).unwrap();
        let zero_h = crate::operators::Hamiltonian::Affine { base: fock.identity.clone() * C64::new(0.0, 0.0), couplings: vec![] };
        let model = QuantumModel::new(3, zero_h, vec![], 1.0).unwrap();
        let meas = MeasurementModel::new(vec![fock.q.clone() * C64::new(0.0, 0.0)], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let classical = ClassicalModel::ornstein_uhlenbeck(0.0, 0.0, 0.0, 0.01).unwrap();
        let grid = ClassicalGrid::uniform_1d(-1.0, 1.0, 21).unwrap();
        let rho0 = fock.identity.clone() * C64::new(1.0 / 3.0, 0.0);
        let engine = HybridEngine::from_parts(
            model,
            meas,
            classical,
            grid,
            TimeGrid { t0: 0.0, dt: 0.01, steps: 3 },
            rho0,
            PropagatorKind::Auto,
        )
        .unwrap();
        let f0 = init_field(&engine).unwrap();
        let mut f = f0.clone();
        for _ in 0..3 {
            filter_step(&engine, &mut f, &[0.37]).unwrap();
        }
        let diff = f.stack.data.iter().zip(&f0.stack.data).fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
        assert!(diff < 1e-14);
        assert!(f.log_weight.abs() < 1e-14);
        let id = TransitionKernel::identity(21);
        let mixed = engine.mix(&f0.stack, &id, false);
        assert_eq!(mixed, f0.stack);
    }

    #[test]
    fn two_half_steps_agree_with_one_step_to_second_order() {
        // predict over dt vs two predicts over dt/2; the gap must shrink ~dt^2.
        // sigma keeps the step sd above the grid spacing at every dt used here
        let mut gaps = vec![];
        for dt in [0.02, 0.01] {
            let full = oscillator_engine_with(121, dt, 1, PropagatorKind::Rk4, 2.0);
            let half = oscillator_engine_with(121, dt / 2.0, 2, PropagatorKind::Rk4, 2.0);
            let mut a = init_field(&full).unwrap();
            let mut b = init_field(&half).unwrap();
            // start from a field with quantum coherence across grid points
            for f in [&mut a, &mut b] {
                for k in 0..f.stack.len() {
                    let x = f.grid.point(k)[0];
                    let rho = crate::operators::pure_density(&coherent_state(8, C64::new(0.5 + 0.2 * x, 0.3)));
                    let w = f.stack.traces()[k];
                    f.stack.block_mut(k).copy_from_slice((rho * C64::new(w, 0.0)).as_slice());
                }
            }
            predict_step(&full, &mut a).unwrap();
            predict_step(&half, &mut b).unwrap();
            predict_step(&half, &mut b).unwrap();
            let mut worst = 0.0_f64;
            for k in 0..a.stack.len() {
                worst = worst.max(max_abs(&(a.stack.operator(k) - b.stack.operator(k))));
            }
            gaps.push(worst);
        }
        let order = (gaps[0] / gaps[1]).log2();
        assert!(gaps[1] < 1e-3, "{gaps:?}");
        assert!(order > 1.5, "gaps {gaps:?} order {order}");
    }

    #[test]
    fn two_point_posterior_ratio_follows_likelihood() {
        // blocks with <q> = +-1: one update multiplies p(+)/p(-) by ~exp(2 dy / R)
        let fock = build_fock_operators(12, 1.0, 1.0).unwrap();
        let model = QuantumModel::new(12, driven_oscillator(&fock, 1.0, 1.0, 1), vec![], 1.0).unwrap();
        let r = 0.5;
        let meas = MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, r)).unwrap();
        let classical = ClassicalModel::ornstein_uhlenbeck(0.0, 0.0, 0.0, 1.0).unwrap();
        let grid = ClassicalGrid::uniform_1d(-1.0, 1.0, 3).unwrap();
        let dt = 1e-4;
        let engine = HybridEngine::from_parts(
            model,
            meas,
            classical,
            grid.clone(),
            TimeGrid { t0: 0.0, dt, steps: 1 },
            fock.identity.clone(),
            PropagatorKind::Auto,
        )
        .unwrap();
        // coherent amplitude alpha gives <q> = sqrt(2) alpha for omega = hbar = 1
        let alpha = 1.0 / 2f64.sqrt();
        let plus = crate::operators::pure_density(&coherent_state(12, C64::new(alpha, 0.0)));
        let minus = crate::operators::pure_density(&coherent_state(12, C64::new(-alpha, 0.0)));
        let zero = &plus * C64::new(0.0, 0.0);
        let mut f = HybridDensityField {
            grid: Arc::new(grid),
            stack: BlockStack::from_blocks(&[minus, zero, plus]),
            log_weight: 0.0,
            t: 0.0,
            step: 0,
        };
        f.normalize();
        let dy = 0.01;
        update_step(&engine, &mut f, &[dy]).unwrap();
        let p = f.marginal();
        let ratio = p[2] / p[0];
        let expected = (2.0 * dy / r).exp();
        assert!((ratio / expected - 1.0).abs() < 10.0 * dt, "ratio {ratio} expected {expected}");
    }

    #[test]
    fn fused_step_equals_update_then_predict() {
        for kind in [PropagatorKind::Exact, PropagatorKind::Rk4] {
            let engine = oscillator_engine(41, 0.01, 5, kind);
            let mut a = init_field(&engine).unwrap();
            let mut b = a.clone();
            for dy in [0.03, -0.05, 0.01] {
                filter_step(&engine, &mut a, &[dy]).unwrap();
                update_step(&engine, &mut b, &[dy]).unwrap();
                predict_step(&engine, &mut b).unwrap();
            }
            let diff = a.stack.data.iter().zip(&b.stack.data).fold(0.0_f64, |m, (x, y)| m.max((x - y).norm()));
            assert!(diff < 1e-12, "{kind:?}: {diff}");
            assert!((a.log_weight - b.log_weight).abs() < 1e-12);
            assert_eq!(a.step, b.step);
        }
    }

    #[test]
    fn zero_length_record_gives_prior_only() {
        let engine = oscillator_engine(41, 0.01, 0, PropagatorKind::Auto);
        let run = run_filter(&engine, &[], Some(1)).unwrap();
        assert_eq!(run.estimates.len(), 1);
        assert_eq!(run.snapshots.len(), 1);
        assert_eq!(run.estimates[0].t, 0.0);
    }

    #[test]
    fn snapshot_steps_include_both_ends() {
        assert_eq!(snapshot_steps(10, 4), vec![0, 4, 8, 10]);
        assert_eq!(snapshot_steps(8, 4), vec![0, 4, 8]);
        assert_eq!(snapshot_steps(0, 3), vec![0]);
    }

    #[test]
    fn prediction_relaxes_to_stationary_ou_variance() {
        let engine = oscillator_engine(121, 0.05, 0, PropagatorKind::Auto);
        let f = init_field(&engine).unwrap();
        let path = predict_ahead(&engine, &f, 20.0).unwrap();
        assert_eq!(path.len(), 401);
        let stationary = 0.25 / (2.0 * 0.2);
        let v = path.last().unwrap().x_cov[(0, 0)];
        // prior var 0.25 relaxes toward 0.625 as 0.625 - 0.375 exp(-0.4 t)
        let expected = stationary - (stationary - 0.25) * (-2.0 * 0.2 * 20.0_f64).exp();
        assert!((v - expected).abs() < 0.01, "{v} vs {expected}");
        assert!(predict_ahead(&engine, &f, 0.0).unwrap().len() == 1);
    }
}
