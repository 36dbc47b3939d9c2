//! Backward effect pass: `g(x_k)` starts at the identity at `T` and is pulled back
//! through the adjoint of every forward step, newest increment first.

use std::sync::Arc;

use crate::classical::ClassicalGrid;
use crate::engine::{BlockStack, HybridEngine};
use crate::error::{Error, Result};
use crate::forward::snapshot_steps;
use crate::linalg::{Operator, ONE};

/// Effect field on the grid, scaled so that `sum_k tr g_k = K d`.
#[derive(Clone, Debug)]
pub struct EffectField {
    pub grid: Arc<ClassicalGrid>,
    pub stack: BlockStack,
    pub log_weight: f64,
    pub t: f64,
    /// Time index `i` of `t_i`.
    pub step: usize,
}

impl EffectField {
    pub fn dim(&self) -> usize {
        self.stack.dim
    }

    pub fn trace_sum(&self) -> f64 {
        self.stack.traces().iter().sum()
    }

    fn renormalize(&mut self) -> Result<()> {
        let target = (self.stack.len() * self.dim()) as f64;
        let s = self.trace_sum();
        if !(s > 1e-300) || !s.is_finite() {
            return Err(Error::DegenerateUpdate { step: self.step, trace: s });
        }
        self.stack.scale(target / s);
        self.log_weight += (s / target).ln();
        Ok(())
    }
}

/// Identity blocks at `t_steps`.
pub fn init_effect(engine: &HybridEngine, steps: usize) -> EffectField {
    let d = engine.dim;
    let k = engine.grid.len();
    let id = Operator::from_diagonal_element(d, d, ONE);
    EffectField {
        grid: engine.grid.clone(),
        stack: BlockStack::from_blocks(&vec![id; k]),
        log_weight: 0.0,
        t: engine.time.time(steps),
        step: steps,
    }
}

/// Undoes the forward step `field.step - 1` using that step's increment:
/// adjoint mixing, adjoint dynamics, then `M^dagger g M`.
pub fn backward_step(engine: &HybridEngine, field: &mut EffectField, dy: &[f64]) -> Result<()> {
    if field.step == 0 {
        return Err(Error::InvalidArgument("effect field is already at t0".into()));
    }
    let i = field.step - 1;
    let kernel = engine.kernel_at(i)?;
    field.stack = engine.mix(&field.stack, &kernel, true);
    let kraus = engine.kraus(dy)?;
    engine.apply_measured_dynamics(&mut field.stack, &kraus, true);
    field.stack.hermitize();
    if let Some(k) = field.stack.first_non_finite() {
        return Err(Error::NumericalOverflow(format!("non-finite effect block at grid point {k}, step {i}")));
    }
    field.step = i;
    field.t = engine.time.time(i);
    field.renormalize().map_err(|e| e.at_step(i))
}

/// Runs the effect pass over the whole record, calling `visit` at each step in
/// [`snapshot_steps`] (from `T` down to `t0`).
pub fn run_backward_with(
    engine: &HybridEngine,
    dy: &[Vec<f64>],
    stride: usize,
    mut visit: impl FnMut(&EffectField) -> Result<()>,
) -> Result<EffectField> {
    let keep = snapshot_steps(dy.len(), stride);
    let mut next = keep.len();
    let mut field = init_effect(engine, dy.len());
    let mut maybe_visit = |field: &EffectField, next: &mut usize| -> Result<()> {
        if *next > 0 && keep[*next - 1] == field.step {
            *next -= 1;
            visit(field)?;
        }
        Ok(())
    };
    maybe_visit(&field, &mut next)?;
    for i in (0..dy.len()).rev() {
        backward_step(engine, &mut field, &dy[i]).map_err(|e| e.at_step(i))?;
        maybe_visit(&field, &mut next)?;
    }
    Ok(field)
}

/// Effect snapshots at [`snapshot_steps`], in increasing time order.
pub fn run_backward(engine: &HybridEngine, dy: &[Vec<f64>], stride: usize) -> Result<Vec<EffectField>> {
    let mut out = Vec::new();
    run_backward_with(engine, dy, stride, |g| {
        out.push(g.clone());
        Ok(())
    })?;
    out.reverse();
    Ok(out)
}
