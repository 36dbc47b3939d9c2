//! Shared propagation machinery for the forward and backward passes: per-grid-point
//! quantum propagators, Kraus application, and kernel mixing over a stack of blocks.

use std::sync::Arc;

use rayon::prelude::*;

use crate::classical::{ClassicalGrid, ClassicalModel, KernelCache, TransitionKernel};
use crate::error::{Error, Result};
use crate::linalg::{adjoint_into, gemm_slices, sandwich, unitary_exp, Op, Operator, SparseOp, C64, ONE, ZERO};
use crate::operators::{lindblad_adjoint_with, lindblad_with, MeasurementModel, QuantumModel};
use crate::scenario::{PropagatorKind, Scenario, TimeGrid};

/// `K` Hermitian `d x d` blocks stored contiguously, each column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStack {
    pub dim: usize,
    pub data: Vec<C64>,
}

impl BlockStack {
    pub fn zeros(count: usize, dim: usize) -> Self {
        BlockStack { dim, data: vec![ZERO; count * dim * dim] }
    }

    pub fn from_blocks(blocks: &[Operator]) -> Self {
        let dim = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        let mut data = Vec::with_capacity(blocks.len() * dim * dim);
        for b in blocks {
            data.extend_from_slice(b.as_slice());
        }
        BlockStack { dim, data }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / (self.dim * self.dim)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, k: usize) -> &[C64] {
        let s = self.dim * self.dim;
        &self.data[k * s..(k + 1) * s]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [C64] {
        let s = self.dim * self.dim;
        &mut self.data[k * s..(k + 1) * s]
    }

    pub fn operator(&self, k: usize) -> Operator {
        Operator::from_column_slice(self.dim, self.dim, self.block(k))
    }

    pub fn traces(&self) -> Vec<f64> {
        let d = self.dim;
        (0..self.len()).map(|k| (0..d).map(|i| self.block(k)[i + i * d].re).sum()).collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|z| *z *= s);
    }

    /// Replaces each block by its Hermitian part.
    pub fn hermitize(&mut self) {
        let d = self.dim;
        self.data.par_chunks_mut(d * d).for_each(|b| {
            for j in 0..d {
                b[j + j * d].im = 0.0;
                for i in 0..j {
                    let avg = (b[i + j * d] + b[j + i * d].conj()) * 0.5;
                    b[i + j * d] = avg;
                    b[j + i * d] = avg.conj();
                }
            }
        });
    }

    /// Index of the first block holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        let s = self.dim * self.dim;
        self.data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()).map(|i| i / s)
    }

    /// Frobenius pairing `sum_k tr[a_k b_k]` (real part) and the discarded imaginary part.
    pub fn pairing(a: &BlockStack, b: &BlockStack) -> (Vec<f64>, f64) {
        let d = a.dim;
        let mut worst_im = 0.0_f64;
        let per = (0..a.len())
            .map(|k| {
                let z = crate::linalg::trace_product_slices(d, a.block(k), b.block(k));
                worst_im = worst_im.max(z.im.abs());
                z.re
            })
            .collect();
        (per, worst_im)
    }
}

/// Measurement operator for one increment, kept sparse when that saves work.
#[derive(Clone, Debug)]
pub enum Kraus {
    /// The operator and its adjoint.
    Dense(Operator, Operator),
    Sparse(SparseOp),
}

impl Kraus {
    pub fn new(m: Operator) -> Self {
        let sparse = SparseOp::from_dense(&m, 0.0);
        if sparse.density() < 0.3 {
            Kraus::Sparse(sparse)
        } else {
            let m_h = m.adjoint();
            Kraus::Dense(m, m_h)
        }
    }

    fn apply(&self, d: usize, f: &[C64], out: &mut [C64], scratch: &mut [C64], adjoint: bool) {
        match self {
            Kraus::Dense(m, m_h) => sandwich(d, m.as_slice(), m_h.as_slice(), f, out, scratch, adjoint),
            Kraus::Sparse(s) => s.sandwich(f, out, scratch, adjoint),
        }
    }
}

/// Quantum evolution of one grid point's block over one time step.
#[derive(Clone, Debug)]
pub enum BlockPropagator {
    /// Conjugation by `U = exp(-i H(x) dt / hbar)`; holds `U` and `U^dagger`.
    Exact(Operator, Operator),
    /// Fourth-order Runge-Kutta step with `H(x)` frozen over the step.
    Rk4(Operator),
}

/// Everything needed to advance hybrid fields on one grid and time step.
pub struct HybridEngine {
    pub dim: usize,
    pub grid: Arc<ClassicalGrid>,
    pub time: TimeGrid,
    pub quantum: QuantumModel,
    pub measurement: MeasurementModel,
    pub classical: ClassicalModel,
    pub rho0: Operator,
    pub kind: PropagatorKind,
    kernels: KernelCache,
    propagators: Vec<BlockPropagator>,
}

impl HybridEngine {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        HybridEngine::from_parts(
            scenario.filter.model.clone(),
            scenario.filter.measurement.clone(),
            scenario.classical.clone(),
            scenario.grid.clone(),
            scenario.time,
            scenario.filter.rho0.clone(),
            scenario.propagator,
        )
    }

    pub fn from_parts(
        quantum: QuantumModel,
        measurement: MeasurementModel,
        classical: ClassicalModel,
        grid: ClassicalGrid,
        time: TimeGrid,
        rho0: Operator,
        kind: PropagatorKind,
    ) -> Result<Self> {
        let dim = quantum.dim;
        if measurement.dim() != dim || rho0.nrows() != dim {
            return Err(Error::InvalidArgument("quantum, measurement and prior dimensions differ".into()));
        }
        if grid.dim() != classical.n {
            return Err(Error::InvalidArgument("grid dimension does not match the classical state".into()));
        }
        let kind = match kind {
            PropagatorKind::Auto if quantum.dissipators.is_empty() => PropagatorKind::Exact,
            PropagatorKind::Auto => PropagatorKind::Rk4,
            PropagatorKind::Exact if !quantum.dissipators.is_empty() => {
                return Err(Error::InvalidArgument("exact propagation needs a dissipator-free model".into()))
            }
            other => other,
        };
        let mut propagators = Vec::with_capacity(grid.len());
        for x in grid.points() {
            let h = quantum.hamiltonian_at(x)?;
            propagators.push(match kind {
                PropagatorKind::Exact => {
                    let u = unitary_exp(&h, time.dt / quantum.hbar);
                    let u_h = u.adjoint();
                    BlockPropagator::Exact(u, u_h)
                }
                _ => BlockPropagator::Rk4(h),
            });
        }
        let kernels = KernelCache::new(classical.clone(), grid.clone());
        Ok(HybridEngine {
            dim,
            grid: Arc::new(grid),
            time,
            quantum,
            measurement,
            classical,
            rho0,
            kind,
            kernels,
            propagators,
        })
    }

    pub fn dt(&self) -> f64 {
        self.time.dt
    }

    pub fn kernel_at(&self, step: usize) -> Result<Arc<TransitionKernel>> {
        self.kernels.get(self.time.time(step), self.time.dt)
    }

    pub fn boundary_warnings(&self) -> usize {
        self.kernels.boundary_warnings()
    }

    pub fn propagator(&self, k: usize) -> &BlockPropagator {
        &self.propagators[k]
    }

    /// `M(dy)` at the engine's step length.
    pub fn kraus(&self, dy: &[f64]) -> Result<Kraus> {
        Ok(Kraus::new(self.measurement.kraus(dy, self.time.dt)?))
    }

    /// `f_k <- M f_k M^dagger` (or `M^dagger g_k M`) for every block.
    pub fn apply_kraus(&self, stack: &mut BlockStack, kraus: &Kraus, adjoint: bool) {
        let d = stack.dim;
        stack.data.par_chunks_mut(d * d).for_each_init(
            || (vec![ZERO; d * d], vec![ZERO; d * d]),
            |(out, scratch), block| {
                kraus.apply(d, block, out, scratch, adjoint);
                block.copy_from_slice(out);
            },
        );
    }

    /// Quantum evolution of every block at its own grid point (or its adjoint).
    pub fn apply_dynamics(&self, stack: &mut BlockStack, adjoint: bool) {
        let d = stack.dim;
        let dt = self.time.dt;
        stack.data.par_chunks_mut(d * d).enumerate().for_each_init(
            || (vec![ZERO; d * d], vec![ZERO; d * d]),
            |(out, scratch), (k, block)| match &self.propagators[k] {
                BlockPropagator::Exact(u, u_h) => {
                    // forward U f U^dag, adjoint U^dag g U
                    sandwich(d, u.as_slice(), u_h.as_slice(), block, out, scratch, adjoint);
                    block.copy_from_slice(out);
                }
                BlockPropagator::Rk4(h) => {
                    let f = Operator::from_column_slice(d, d, block);
                    let next = rk4_step(&f, dt, |rho| {
                        if adjoint {
                            lindblad_adjoint_with(h, &self.quantum, rho)
                        } else {
                            lindblad_with(h, &self.quantum, rho)
                        }
                    });
                    block.copy_from_slice(next.as_slice());
                }
            },
        );
    }

    /// Measurement update followed by the quantum dynamics, or (with `adjoint`) the
    /// adjoint of that composition. Exact propagators fold both into one conjugation
    /// by `U_k M` per block.
    pub fn apply_measured_dynamics(&self, stack: &mut BlockStack, kraus: &Kraus, adjoint: bool) {
        if self.kind != PropagatorKind::Exact {
            if adjoint {
                self.apply_dynamics(stack, true);
                self.apply_kraus(stack, kraus, true);
            } else {
                self.apply_kraus(stack, kraus, false);
                self.apply_dynamics(stack, false);
            }
            return;
        }
        let d = stack.dim;
        let s = d * d;
        stack.data.par_chunks_mut(s).enumerate().for_each_init(
            || (vec![ZERO; s], vec![ZERO; s], vec![ZERO; s], vec![ZERO; s]),
            |(a, a_h, out, scratch), (k, block)| {
                let BlockPropagator::Exact(u, _) = &self.propagators[k] else {
                    unreachable!("exact kind holds exact propagators")
                };
                match kraus {
                    Kraus::Sparse(m) => m.right_multiply(u.as_slice(), a),
                    Kraus::Dense(m, _) => gemm_slices(d, ONE, u.as_slice(), Op::N, m.as_slice(), Op::N, ZERO, a),
                }
                adjoint_into(d, a, a_h);
                sandwich(d, a, a_h, block, out, scratch, adjoint);
                block.copy_from_slice(out);
            },
        );
    }

    /// Kernel mixing: forward `f'_j = sum_k K[k->j] f_k`, adjoint `g'_k = sum_j K[k->j] g_j`.
    pub fn mix(&self, stack: &BlockStack, kernel: &TransitionKernel, adjoint: bool) -> BlockStack {
        let d = stack.dim;
        let s = d * d;
        let mut out = BlockStack::zeros(stack.len(), d);
        out.data.par_chunks_mut(s).enumerate().for_each(|(target, dst)| {
            let sources = if adjoint { kernel.row(target) } else { kernel.column(target) };
            for &(src, w) in sources {
                let b = &stack.data[src * s..(src + 1) * s];
                for (o, v) in dst.iter_mut().zip(b) {
                    *o += v * w;
                }
            }
        });
        out
    }
}

/// One classical RK4 step of the linear ODE `y' = gen(y)`.
pub fn rk4_step(y: &Operator, dt: f64, gen: impl Fn(&Operator) -> Operator) -> Operator {
    let half = C64::new(dt / 2.0, 0.0);
    let k1 = gen(y);
    let k2 = gen(&(y + &k1 * half));
    let k3 = gen(&(y + &k2 * half));
    let k4 = gen(&(y + &k3 * C64::new(dt, 0.0)));
    y + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0)
}
