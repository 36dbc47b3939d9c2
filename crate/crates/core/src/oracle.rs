//! Reference answers for tiny instances.
//!
//! Everything here works on explicit `d^2 x d^2` superoperators and dense
//! kernels, either by summing over every classical path or by plain
//! recursion, with no renormalization. Sizes are capped so that path sums stay
//! cheap: at most [`MAX_STEPS`] increments, [`MAX_POINTS`] grid points and
//! quantum dimension [`MAX_DIM`].

use nalgebra::{DMatrix, DVector};

use crate::classical::ClassicalGrid;
use crate::engine::{BlockStack, HybridEngine};
use crate::error::{Error, Result};
use crate::forward::init_field;
use crate::linalg::{trace_product, Operator, C64, ONE};
use crate::operators::{lindblad_superoperator, MeasurementModel, QuantumModel};

pub const MAX_STEPS: usize = 6;
pub const MAX_POINTS: usize = 4;
pub const MAX_DIM: usize = 3;

const STOCHASTIC_TOL: f64 = 1e-12;

pub type KrausBuilder = Box<dyn Fn(&[f64]) -> Result<Operator> + Send + Sync>;

/// A fully discrete hybrid model: one superoperator per grid point, a
/// row-stochastic kernel `transition[(k, j)] = P(k -> j)` and a Kraus map per increment.
pub struct DiscreteScenario {
    pub transition: DMatrix<f64>,
    pub prior: Vec<f64>,
    pub rho0: Operator,
    /// Column-stacked action of the per-step quantum dynamics at each grid point.
    pub propagators: Vec<DMatrix<C64>>,
    pub kraus: KrausBuilder,
}

fn vectorize(op: &Operator) -> DVector<C64> {
    DVector::from_column_slice(op.as_slice())
}

fn unvectorize(d: usize, v: &DVector<C64>) -> Operator {
    Operator::from_column_slice(d, d, v.as_slice())
}

/// Matrix of a linear map on `d x d` operators, column-stacked.
pub fn superoperator(d: usize, map: impl Fn(&Operator) -> Operator) -> DMatrix<C64> {
    let mut s = DMatrix::<C64>::zeros(d * d, d * d);
    for col in 0..d * d {
        let mut basis = Operator::zeros(d, d);
        basis[(col % d, col / d)] = ONE;
        s.set_column(col, &vectorize(&map(&basis)));
    }
    s
}

fn apply_super(s: &DMatrix<C64>, op: &Operator) -> Operator {
    unvectorize(op.nrows(), &(s * vectorize(op)))
}

/// Heisenberg-picture action; valid for Hermitian arguments and Hermiticity-preserving maps.
fn apply_super_adjoint(s: &DMatrix<C64>, op: &Operator) -> Operator {
    unvectorize(op.nrows(), &(s.adjoint() * vectorize(op)))
}

fn check_stochastic(m: &DMatrix<f64>) -> Result<()> {
    for (k, row) in m.row_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument(format!("transition row {k} is not a probability vector")));
        }
    }
    Ok(())
}

impl DiscreteScenario {
    pub fn new(
        transition: DMatrix<f64>,
        prior: Vec<f64>,
        rho0: Operator,
        propagators: Vec<DMatrix<C64>>,
        kraus: KrausBuilder,
    ) -> Result<Self> {
        let k = prior.len();
        let d = rho0.nrows();
        if k > MAX_POINTS || d > MAX_DIM {
            return Err(Error::TooLarge(format!("{k} grid points and dimension {d} (limits {MAX_POINTS}, {MAX_DIM})")));
        }
        if transition.shape() != (k, k) || propagators.len() != k {
            return Err(Error::InvalidArgument("kernel, prior and propagators disagree on the grid size".into()));
        }
        if propagators.iter().any(|s| s.shape() != (d * d, d * d)) {
            return Err(Error::InvalidArgument(format!("propagators must be {0}x{0}", d * d)));
        }
        check_stochastic(&transition)?;
        if prior.iter().any(|&p| p < 0.0) || (prior.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument("prior is not a probability vector".into()));
        }
        Ok(DiscreteScenario { transition, prior, rho0, propagators, kraus })
    }

    /// The engine's own per-step pieces: kernel at `t0`, prior marginal and
    /// block propagators probed on a basis.
    pub fn from_engine(engine: &HybridEngine) -> Result<Self> {
        let d = engine.dim;
        let k = engine.grid.len();
        if k > MAX_POINTS || d > MAX_DIM {
            return Err(Error::TooLarge(format!("{k} grid points and dimension {d}")));
        }
        if !engine.classical.is_time_invariant() {
            return Err(Error::UnsupportedScenario("discrete oracle needs a time-invariant kernel".into()));
        }
        let vol = engine.grid.cell_volume();
        let prior: Vec<f64> = init_field(engine)?.marginal().iter().map(|p| p * vol).collect();
        let mut propagators = vec![DMatrix::<C64>::zeros(d * d, d * d); k];
        for col in 0..d * d {
            let mut basis = Operator::zeros(d, d);
            basis[(col % d, col / d)] = ONE;
            let mut stack = BlockStack::from_blocks(&vec![basis; k]);
            engine.apply_dynamics(&mut stack, false);
            for (j, s) in propagators.iter_mut().enumerate() {
                s.set_column(col, &vectorize(&stack.operator(j)));
            }
        }
        let measurement = engine.measurement.clone();
        let dt = engine.dt();
        DiscreteScenario::new(
            engine.kernel_at(0)?.to_dense(),
            prior,
            engine.rho0.clone(),
            propagators,
            Box::new(move |dy| measurement.kraus(dy, dt)),
        )
    }

    pub fn points(&self) -> usize {
        self.prior.len()
    }

    pub fn dim(&self) -> usize {
        self.rho0.nrows()
    }

    fn kraus_ops(&self, record: &[Vec<f64>]) -> Result<Vec<Operator>> {
        if record.len() > MAX_STEPS {
            return Err(Error::TooLarge(format!("{} increments (limit {MAX_STEPS})", record.len())));
        }
        record.iter().map(|dy| (self.kraus)(dy)).collect()
    }

    fn zero_blocks(&self) -> Vec<Operator> {
        vec![Operator::zeros(self.dim(), self.dim()); self.points()]
    }
}

/// Every sequence in `0..k` of length `len`, as a flat odometer.
fn paths(k: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k.pow(len as u32);
    (0..total).map(move |mut code| {
        let mut p = vec![0; len];
        for slot in p.iter_mut() {
            *slot = code % k;
            code /= k;
        }
        p
    })
}

/// Unnormalized forward fields `f_tau(x)` for `tau = 0..=L`, summing each classical history separately.
pub fn enumerate_forward(ds: &DiscreteScenario, record: &[Vec<f64>]) -> Result<Vec<Vec<Operator>>> {
    let ms = ds.kraus_ops(record)?;
    let mut out = Vec::with_capacity(ms.len() + 1);
    for tau in 0..=ms.len() {
        let mut f = ds.zero_blocks();
        for path in paths(ds.points(), tau + 1) {
            let mut w = ds.prior[path[0]];
            let mut rho = ds.rho0.clone();
            for i in 0..tau {
                rho = apply_super(&ds.propagators[path[i]], &(&ms[i] * rho * ms[i].adjoint()));
                w *= ds.transition[(path[i], path[i + 1])];
            }
            f[path[tau]] += rho * C64::new(w, 0.0);
        }
        out.push(f);
    }
    Ok(out)
}

/// Same fields as [`enumerate_forward`], one step at a time.
pub fn recursive_forward(ds: &DiscreteScenario, record: &[Vec<f64>]) -> Result<Vec<Vec<Operator>>> {
    let ms = ds.kraus_ops(record)?;
    let k = ds.points();
    let mut f: Vec<Operator> = ds.prior.iter().map(|&p| &ds.rho0 * C64::new(p, 0.0)).collect();
    let mut out = vec![f.clone()];
    for m in &ms {
        let moved: Vec<Operator> =
            (0..k).map(|x| apply_super(&ds.propagators[x], &(m * &f[x] * m.adjoint()))).collect();
        f = ds.zero_blocks();
        for (x, block) in moved.iter().enumerate() {
            for (j, target) in f.iter_mut().enumerate() {
                *target += block * C64::new(ds.transition[(x, j)], 0.0);
            }
        }
        out.push(f.clone());
    }
    Ok(out)
}

/// Effect fields `E_tau(x)` for `tau = 0..=L`, summing over every classical future.
pub fn enumerate_effect(ds: &DiscreteScenario, record: &[Vec<f64>]) -> Result<Vec<Vec<Operator>>> {
    let ms = ds.kraus_ops(record)?;
    let l = ms.len();
    let d = ds.dim();
    let mut out = Vec::with_capacity(l + 1);
    for tau in 0..=l {
        let mut e = ds.zero_blocks();
        for path in paths(ds.points(), l - tau + 1) {
            // path[j] is the grid point at time tau + j
            let mut w = 1.0;
            let mut eff = Operator::identity(d, d);
            for j in (0..l - tau).rev() {
                let i = tau + j;
                eff = ms[i].adjoint() * apply_super_adjoint(&ds.propagators[path[j]], &eff) * &ms[i];
                w *= ds.transition[(path[j], path[j + 1])];
            }
            e[path[0]] += eff * C64::new(w, 0.0);
        }
        out.push(e);
    }
    Ok(out)
}

/// Same fields as [`enumerate_effect`], one step at a time from `T`.
pub fn recursive_effect(ds: &DiscreteScenario, record: &[Vec<f64>]) -> Result<Vec<Vec<Operator>>> {
    let ms = ds.kraus_ops(record)?;
    let k = ds.points();
    let d = ds.dim();
    let mut e = vec![Operator::identity(d, d); k];
    let mut out = vec![e.clone()];
    for m in ms.iter().rev() {
        let mut pulled = ds.zero_blocks();
        for (x, target) in pulled.iter_mut().enumerate() {
            for (j, block) in e.iter().enumerate() {
                *target += block * C64::new(ds.transition[(x, j)], 0.0);
            }
        }
        e = (0..k).map(|x| m.adjoint() * apply_super_adjoint(&ds.propagators[x], &pulled[x]) * m).collect();
        out.push(e.clone());
    }
    out.reverse();
    Ok(out)
}

/// `sum_x Re tr[E(x) f(x)]`.
pub fn pairing(e: &[Operator], f: &[Operator]) -> f64 {
    e.iter().zip(f).map(|(a, b)| trace_product(a, b).re).sum()
}

fn normalized_overlaps(e: &[Operator], f: &[Operator]) -> Result<Vec<f64>> {
    let w: Vec<f64> = e.iter().zip(f).map(|(a, b)| trace_product(a, b).re).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSmoothing { t: f64::NAN, overlap: total });
    }
    Ok(w.iter().map(|v| v / total).collect())
}

/// Smoothed grid probabilities `h_tau(x)` from the path-sum fields.
pub fn oracle_smooth(ds: &DiscreteScenario, record: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let f = enumerate_forward(ds, record)?;
    let e = enumerate_effect(ds, record)?;
    f.iter().zip(&e).map(|(f, e)| normalized_overlaps(e, f)).collect()
}

/// Smoothed probabilities by conditioning whole classical histories on the record:
/// each history gets weight `prior * prod(transition) * tr[rho_T]`.
pub fn brute_force_smooth(ds: &DiscreteScenario, record: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let ms = ds.kraus_ops(record)?;
    let l = ms.len();
    let mut h = vec![vec![0.0; ds.points()]; l + 1];
    for path in paths(ds.points(), l + 1) {
        let mut w = ds.prior[path[0]];
        let mut rho = ds.rho0.clone();
        for i in 0..l {
            rho = apply_super(&ds.propagators[path[i]], &(&ms[i] * rho * ms[i].adjoint()));
            w *= ds.transition[(path[i], path[i + 1])];
        }
        let p = w * crate::linalg::trace(&rho).re;
        for (tau, &x) in path.iter().enumerate() {
            h[tau][x] += p;
        }
    }
    for row in &mut h {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateSmoothing { t: f64::NAN, overlap: s });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(h)
}

/// Classical hidden Markov chain with per-step emission likelihoods. The
/// emission at step `i` is charged in the state occupied before transition `i`.
#[derive(Clone, Debug)]
pub struct HiddenMarkov {
    pub initial: Vec<f64>,
    /// `transitions[i][(s, s')]`, one per step.
    pub transitions: Vec<DMatrix<f64>>,
    pub emissions: Vec<Vec<f64>>,
}

impl HiddenMarkov {
    /// Posterior state probabilities at `0..=L` by scaled forward-backward.
    pub fn posterior(&self) -> Result<Vec<Vec<f64>>> {
        let l = self.emissions.len();
        if self.transitions.len() != l {
            return Err(Error::InvalidArgument("one transition matrix per emission is required".into()));
        }
        let normalize = |v: &mut Vec<f64>| -> Result<()> {
            let s: f64 = v.iter().sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateSmoothing { t: f64::NAN, overlap: s });
            }
            v.iter_mut().for_each(|x| *x /= s);
            Ok(())
        };
        let n = self.initial.len();
        let mut alpha = vec![self.initial.clone()];
        for i in 0..l {
            let prev = &alpha[i];
            let mut next = vec![0.0; n];
            for (s, (p, e)) in prev.iter().zip(&self.emissions[i]).enumerate() {
                let w = p * e;
                if w != 0.0 {
                    for (t, slot) in next.iter_mut().enumerate() {
                        *slot += w * self.transitions[i][(s, t)];
                    }
                }
            }
            normalize(&mut next)?;
            alpha.push(next);
        }
        let mut beta = vec![vec![1.0; n]; l + 1];
        for i in (0..l).rev() {
            let mut b: Vec<f64> = (0..n)
                .map(|s| {
                    self.emissions[i][s] * (0..n).map(|t| self.transitions[i][(s, t)] * beta[i + 1][t]).sum::<f64>()
                })
                .collect();
            normalize(&mut b)?;
            beta[i] = b;
        }
        alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| {
                let mut p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
                normalize(&mut p)?;
                Ok(p)
            })
            .collect()
    }
}

fn is_diagonal(op: &Operator) -> bool {
    let scale = crate::linalg::max_abs(op).max(1.0);
    op.iter().enumerate().all(|(idx, v)| idx % op.nrows() == idx / op.nrows() || v.norm() <= 1e-14 * scale)
}

/// The engine run as a classical chain on `(grid point, level)` pairs. Only
/// valid when the prior, the Hamiltonians, the measurement channels and the
/// dissipative dynamics never create coherences between levels.
pub fn diagonal_hmm(engine: &HybridEngine, record: &[Vec<f64>]) -> Result<HiddenMarkov> {
    let d = engine.dim;
    let k = engine.grid.len();
    if !is_diagonal(&engine.rho0) || !engine.measurement.channels.iter().all(is_diagonal) {
        return Err(Error::UnsupportedScenario("prior state and measurement channels must be diagonal".into()));
    }
    // population transfer per grid point: pops[x][(n, n')]
    let mut pops = vec![DMatrix::<f64>::zeros(d, d); k];
    for n in 0..d {
        let mut basis = Operator::zeros(d, d);
        basis[(n, n)] = ONE;
        let mut stack = BlockStack::from_blocks(&vec![basis; k]);
        engine.apply_dynamics(&mut stack, false);
        for (x, p) in pops.iter_mut().enumerate() {
            let out = stack.operator(x);
            if !is_diagonal(&out) {
                return Err(Error::UnsupportedScenario("dynamics create coherences".into()));
            }
            for m in 0..d {
                p[(n, m)] = out[(m, m)].re;
            }
        }
    }
    let vol = engine.grid.cell_volume();
    let marginal = init_field(engine)?.marginal();
    let initial: Vec<f64> =
        (0..k * d).map(|s| marginal[s / d] * vol * engine.rho0[(s % d, s % d)].re).collect();
    let mut transitions = Vec::with_capacity(record.len());
    let mut emissions = Vec::with_capacity(record.len());
    for (i, dy) in record.iter().enumerate() {
        let kernel = engine.kernel_at(i)?.to_dense();
        transitions.push(DMatrix::from_fn(k * d, k * d, |s, t| {
            kernel[(s / d, t / d)] * pops[s / d][(s % d, t % d)]
        }));
        let m = engine.measurement.kraus(dy, engine.dt())?;
        if !is_diagonal(&m) {
            return Err(Error::UnsupportedScenario("measurement operator is not diagonal".into()));
        }
        emissions.push((0..k * d).map(|s| m[(s % d, s % d)].norm_sqr()).collect());
    }
    Ok(HiddenMarkov { initial, transitions, emissions })
}

/// Marginal over the grid of product-space probabilities laid out as `s = x d + n`.
pub fn grid_marginal(p: &[f64], d: usize) -> Vec<f64> {
    p.chunks(d).map(|c| c.iter().sum()).collect()
}

/// Continuous-time limit of a coarsely sampled record: the increments arrive
/// as instantaneous kicks (the `dt -> 0` limit of the measurement operator at
/// fixed `dy`) at the start of each interval,
/// and between kicks the joint state evolves under the exact exponential of
/// the hybrid generator (Lindblad at each point, the no-click damping
/// `-{C^dagger R^-1 C, .}/8` and the classical jump rates).
pub struct ContinuumLadder {
    dim: usize,
    points: usize,
    flow: DMatrix<C64>,
    measurement: MeasurementModel,
    prior: Vec<f64>,
    rho0: Operator,
}

impl ContinuumLadder {
    /// `rates[(k, j)]` is the jump rate `k -> j` (rows sum to zero).
    pub fn new(
        quantum: &QuantumModel,
        measurement: &MeasurementModel,
        grid: &ClassicalGrid,
        rates: &DMatrix<f64>,
        prior: Vec<f64>,
        rho0: Operator,
        interval: f64,
    ) -> Result<Self> {
        let d = quantum.dim;
        let k = grid.len();
        if k > MAX_POINTS || d > MAX_DIM {
            return Err(Error::TooLarge(format!("{k} grid points and dimension {d}")));
        }
        if rates.shape() != (k, k) || prior.len() != k {
            return Err(Error::InvalidArgument("rates and prior must match the grid".into()));
        }
        for (j, row) in rates.row_iter().enumerate() {
            if row.sum().abs() > 1e-9 * (1.0 + row.amax()) || row.iter().enumerate().any(|(i, &v)| i != j && v < 0.0) {
                return Err(Error::InvalidArgument(format!("rate row {j} is not a generator row")));
            }
        }
        let dd = d * d;
        let damp = measurement.decoherence_op() * C64::new(0.125, 0.0);
        let damping = superoperator(d, |e| -(&damp * e + e * &damp));
        let mut gen = DMatrix::<C64>::zeros(k * dd, k * dd);
        for x in 0..k {
            let local = lindblad_superoperator(quantum, grid.point(x))? + &damping;
            let mut block = gen.view_mut((x * dd, x * dd), (dd, dd));
            block += &local;
            for j in 0..k {
                let r = rates[(x, j)];
                if r != 0.0 {
                    for a in 0..dd {
                        gen[(j * dd + a, x * dd + a)] += C64::new(r, 0.0);
                    }
                }
            }
        }
        let flow = (gen * C64::new(interval, 0.0)).exp();
        Ok(ContinuumLadder { dim: d, points: k, flow, measurement: measurement.clone(), prior, rho0 })
    }

    fn blocks(&self, v: &DVector<C64>) -> Vec<Operator> {
        let dd = self.dim * self.dim;
        (0..self.points).map(|x| unvectorize(self.dim, &v.rows(x * dd, dd).into_owned())).collect()
    }

    fn stack(&self, blocks: &[Operator]) -> DVector<C64> {
        let mut v = Vec::with_capacity(self.points * self.dim * self.dim);
        for b in blocks {
            v.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(v)
    }

    /// Smoothed grid probabilities at the `kicks.len() + 1` interval boundaries.
    pub fn smooth(&self, kicks: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let ms: Vec<Operator> = kicks.iter().map(|dy| self.measurement.kick(dy)).collect::<Result<_>>()?;
        let mut f: Vec<Operator> = self.prior.iter().map(|&p| &self.rho0 * C64::new(p, 0.0)).collect();
        let mut forward = vec![f.clone()];
        for m in &ms {
            let kicked: Vec<Operator> = f.iter().map(|b| m * b * m.adjoint()).collect();
            f = self.blocks(&(&self.flow * self.stack(&kicked)));
            forward.push(f.clone());
        }
        let mut e = vec![Operator::identity(self.dim, self.dim); self.points];
        let mut effects = vec![e.clone()];
        let flow_h = self.flow.adjoint();
        for m in ms.iter().rev() {
            let pulled = self.blocks(&(&flow_h * self.stack(&e)));
            e = pulled.iter().map(|b| m.adjoint() * b * m).collect();
            effects.push(e.clone());
        }
        effects.reverse();
        forward.iter().zip(&effects).map(|(f, e)| normalized_overlaps(e, f)).collect()
    }
}

/// Fine-grid record that delivers each coarse increment in the first of
/// `per_interval` steps and nothing in the rest.
pub fn ladder_record(kicks: &[Vec<f64>], per_interval: usize) -> Vec<Vec<f64>> {
    let zero = vec![0.0; kicks.first().map_or(0, Vec::len)];
    let mut out = Vec::with_capacity(kicks.len() * per_interval);
    for dy in kicks {
        out.push(dy.clone());
        out.extend(std::iter::repeat_n(zero.clone(), per_interval.saturating_sub(1)));
    }
    out
}

/// Convergence ladder of the continuous pipeline towards [`ContinuumLadder`].
#[derive(Clone, Debug)]
pub struct LadderOptions {
    pub kicks: Vec<Vec<f64>>,
    /// Time between kicks.
    pub interval: f64,
    /// Fine steps per interval at each rung.
    pub refinements: Vec<usize>,
    /// The pipeline is run with `dt * dt_scale` while the oracle keeps `dt`; anything
    /// but 1 is a deliberately broken setup for testing the checker.
    pub dt_scale: f64,
}

impl Default for LadderOptions {
    fn default() -> Self {
        LadderOptions {
            kicks: vec![vec![0.6], vec![-0.5], vec![0.3]],
            interval: 0.1,
            refinements: vec![10, 20, 40, 80],
            dt_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LadderReport {
    pub dts: Vec<f64>,
    /// `sum_tau sum_x |h_pipeline - h_oracle|` at each rung.
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln dt`.
    pub order: f64,
    pub oracle: Vec<Vec<f64>>,
}

impl LadderReport {
    pub fn passes(&self) -> bool {
        (self.order - 1.0).abs() <= 0.25
    }
}

/// The matched two-level, two-point instance: oscillator truncated to `d = 2`
/// driven by a random-walk force sitting on `x = -2, 2`, position readout.
pub fn ladder_engine(dt: f64, steps: usize) -> Result<HybridEngine> {
    use crate::classical::ClassicalModel;
    use crate::operators::{build_fock_operators, coherent_state, driven_oscillator, pure_density};
    use crate::scenario::{PropagatorKind, TimeGrid};
    let fock = build_fock_operators(2, 1.0, 1.0)?;
    let model = QuantumModel::new(2, driven_oscillator(&fock, 1.0, 1.0, 1), vec![], 1.0)?;
    let meas = MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, 0.5))?;
    let classical = ClassicalModel::ornstein_uhlenbeck(0.0, 4.0, 0.0, 0.5)?;
    HybridEngine::from_parts(
        model,
        meas,
        classical,
        ClassicalGrid::uniform_1d(-2.0, 2.0, 2)?,
        TimeGrid { t0: 0.0, dt, steps },
        pure_density(&coherent_state(2, C64::new(0.3, 0.0))),
        PropagatorKind::Exact,
    )
}

fn engine_rates(engine: &HybridEngine) -> Result<DMatrix<f64>> {
    let k = engine.grid.len();
    Ok((engine.kernel_at(0)?.to_dense() - DMatrix::identity(k, k)) / engine.dt())
}

fn grid_probabilities(engine: &HybridEngine, h: &[f64]) -> Vec<f64> {
    let vol = engine.grid.cell_volume();
    h.iter().map(|v| v * vol).collect()
}

pub fn run_ladder(opts: &LadderOptions) -> Result<LadderReport> {
    if opts.refinements.len() < 2 || opts.kicks.is_empty() {
        return Err(Error::InvalidArgument("a ladder needs at least two rungs and one kick".into()));
    }
    if opts.kicks.len() > MAX_STEPS {
        return Err(Error::TooLarge(format!("{} kicks (limit {MAX_STEPS})", opts.kicks.len())));
    }
    let probe = ladder_engine(opts.interval / opts.refinements[0] as f64, 0)?;
    let rates = engine_rates(&probe)?;
    let vol = probe.grid.cell_volume();
    let prior: Vec<f64> = init_field(&probe)?.marginal().iter().map(|p| p * vol).collect();
    let continuum =
        ContinuumLadder::new(&probe.quantum, &probe.measurement, &probe.grid, &rates, prior, probe.rho0.clone(), opts.interval)?;
    let oracle = continuum.smooth(&opts.kicks)?;
    let mut dts = Vec::new();
    let mut errors = Vec::new();
    for &n in &opts.refinements {
        let dt = opts.interval / n as f64;
        let engine = ladder_engine(dt * opts.dt_scale, opts.kicks.len() * n)?;
        let drift = (engine_rates(&engine)? - &rates).amax();
        if drift > 1e-9 * (1.0 + rates.amax()) {
            return Err(Error::UnsupportedScenario(format!(
                "kernel is not affine in dt (rates differ by {drift:e}); the ladder needs the stencil regime"
            )));
        }
        let run = crate::smoother::smooth_series(&engine, &ladder_record(&opts.kicks, n), n)?;
        let err: f64 = run
            .smoothed
            .iter()
            .zip(&oracle)
            .map(|(s, o)| grid_probabilities(&engine, &s.h).iter().zip(o).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum();
        dts.push(dt);
        errors.push(err);
    }
    let xs: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let order = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok(LadderReport { dts, errors, order, oracle })
}

/// One pipeline step per kick, against the path-sum oracle built from the
/// engine pieces at `dt_oracle`: the largest deviation of the smoothed
/// probabilities. Equal step lengths should agree to rounding.
pub fn tiny_ladder_deviation(kicks: &[Vec<f64>], dt_oracle: f64, dt_pipeline: f64) -> Result<f64> {
    let ds = DiscreteScenario::from_engine(&ladder_engine(dt_oracle, kicks.len())?)?;
    let oracle = oracle_smooth(&ds, kicks)?;
    let engine = ladder_engine(dt_pipeline, kicks.len())?;
    let run = crate::smoother::smooth_series(&engine, kicks, 1)?;
    Ok(run
        .smoothed
        .iter()
        .zip(&oracle)
        .flat_map(|(s, o)| grid_probabilities(&engine, &s.h).into_iter().zip(o.clone()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max))
}
