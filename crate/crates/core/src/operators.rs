//! Operator algebra on a truncated Hilbert space: Fock-space builders,
//! Lindblad generators and their adjoints, and Gaussian weak-measurement
//! (Kraus) operators in the `(C, R)` parameterization.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    anticommutator, commutator, hermiticity_defect, matmul, Operator, C64, ONE,
};

/// Ladder and quadrature operators of a harmonic oscillator truncated to `dim` Fock states.
#[derive(Clone, Debug)]
pub struct FockOperators {
    pub a: Operator,
    pub a_dag: Operator,
    pub q: Operator,
    pub p: Operator,
    pub identity: Operator,
}

/// Builds `a`, `a^dagger`, `q = sqrt(hbar/2w)(a + a^dagger)`, `p = i sqrt(hbar w/2)(a^dagger - a)` and `1`.
pub fn build_fock_operators(dim: usize, omega: f64, hbar: f64) -> Result<FockOperators> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("Fock dimension must be at least 2, got {dim}")));
    }
    if !(omega > 0.0 && omega.is_finite()) || !(hbar > 0.0 && hbar.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "omega and hbar must be positive and finite (omega={omega}, hbar={hbar})"
        )));
    }
    let mut a = Operator::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    let a_dag = a.adjoint();
    let q = (&a + &a_dag) * C64::new((hbar / (2.0 * omega)).sqrt(), 0.0);
    let p = (&a_dag - &a) * C64::new(0.0, (hbar * omega / 2.0).sqrt());
    Ok(FockOperators { a, a_dag, q, p, identity: Operator::identity(dim, dim) })
}

/// Number-state projector `|n><n|`.
pub fn fock_projector(dim: usize, n: usize) -> Operator {
    let mut rho = Operator::zeros(dim, dim);
    rho[(n, n)] = ONE;
    rho
}

/// Coherent state `|alpha>` truncated to `dim` levels and renormalized.
pub fn coherent_state(dim: usize, alpha: C64) -> DVector<C64> {
    let mut psi = DVector::<C64>::zeros(dim);
    let mut term = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    psi[0] = term;
    for n in 1..dim {
        term = term * alpha / C64::new((n as f64).sqrt(), 0.0);
        psi[n] = term;
    }
    let norm = psi.norm();
    psi / C64::new(norm, 0.0)
}

/// Projector onto a state vector.
pub fn pure_density(psi: &DVector<C64>) -> Operator {
    psi * psi.adjoint()
}

pub type HamiltonianFn = Arc<dyn Fn(&[f64]) -> Operator + Send + Sync>;

/// Map from a classical point `x` to the Hamiltonian `H(x)`.
#[derive(Clone)]
pub enum Hamiltonian {
    /// `H(x) = base + sum_i x_i couplings[i]`.
    Affine { base: Operator, couplings: Vec<Operator> },
    /// Arbitrary Hermitian-valued builder.
    Custom(HamiltonianFn),
}

impl Hamiltonian {
    pub fn at(&self, x: &[f64]) -> Operator {
        match self {
            Hamiltonian::Affine { base, couplings } => {
                let mut h = base.clone();
                for (xi, v) in x.iter().zip(couplings) {
                    h += v * C64::new(*xi, 0.0);
                }
                h
            }
            Hamiltonian::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for Hamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hamiltonian::Affine { base, couplings } => f
                .debug_struct("Affine")
                .field("dim", &base.nrows())
                .field("couplings", &couplings.len())
                .finish(),
            Hamiltonian::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Quantum system: Hamiltonian builder, Lindblad jump operators, and hbar.
#[derive(Clone, Debug)]
pub struct QuantumModel {
    pub dim: usize,
    pub hamiltonian: Hamiltonian,
    pub dissipators: Vec<Operator>,
    pub hbar: f64,
}

impl QuantumModel {
    pub fn new(dim: usize, hamiltonian: Hamiltonian, dissipators: Vec<Operator>, hbar: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("Hilbert dimension must be at least 2, got {dim}")));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidArgument(format!("hbar must be positive, got {hbar}")));
        }
        if let Hamiltonian::Affine { base, couplings } = &hamiltonian {
            for (name, op) in std::iter::once(("base", base)).chain(couplings.iter().map(|c| ("coupling", c))) {
                check_square(op, dim, name)?;
                if hermiticity_defect(op) > 1e-12 {
                    return Err(Error::InvalidArgument(format!("Hamiltonian {name} term is not Hermitian")));
                }
            }
        }
        for l in &dissipators {
            check_square(l, dim, "dissipator")?;
        }
        Ok(QuantumModel { dim, hamiltonian, dissipators, hbar })
    }

    /// Hermitian Hamiltonian at `x`, validated.
    pub fn hamiltonian_at(&self, x: &[f64]) -> Result<Operator> {
        let h = self.hamiltonian.at(x);
        check_square(&h, self.dim, "Hamiltonian")?;
        let defect = hermiticity_defect(&h);
        if defect > 1e-12 * (1.0 + crate::linalg::max_abs(&h)) {
            return Err(Error::InvalidArgument(format!(
                "H(x) is not Hermitian at x={x:?} (defect {defect:e})"
            )));
        }
        Ok(h)
    }

    /// Sum of `L_k^dagger L_k`.
    pub fn dissipation_rate_op(&self) -> Operator {
        let mut acc = Operator::zeros(self.dim, self.dim);
        for l in &self.dissipators {
            acc += matmul(&l.adjoint(), l);
        }
        acc
    }
}

fn check_square(op: &Operator, dim: usize, what: &str) -> Result<()> {
    if op.nrows() != dim || op.ncols() != dim {
        return Err(Error::InvalidArgument(format!(
            "{what} has shape {}x{}, expected {dim}x{dim}",
            op.nrows(),
            op.ncols()
        )));
    }
    Ok(())
}

/// Lindblad generator applied to `rho` at classical point `x`:
/// `-(i/hbar)[H(x), rho] + sum_k (L rho L^dagger - {L^dagger L, rho}/2)`.
pub fn lindblad_apply(model: &QuantumModel, x: &[f64], rho: &Operator) -> Result<Operator> {
    check_square(rho, model.dim, "rho")?;
    let h = model.hamiltonian_at(x)?;
    Ok(lindblad_with(&h, model, rho))
}

pub(crate) fn lindblad_with(h: &Operator, model: &QuantumModel, rho: &Operator) -> Operator {
    let mut out = commutator(h, rho) * C64::new(0.0, -1.0 / model.hbar);
    for l in &model.dissipators {
        let ld = l.adjoint();
        out += matmul(&matmul(l, rho), &ld);
        out -= anticommutator(&matmul(&ld, l), rho) * C64::new(0.5, 0.0);
    }
    out
}

/// Adjoint generator, defined by `tr[e L(rho)] = tr[L*(e) rho]`:
/// `+(i/hbar)[H(x), e] + sum_k (L^dagger e L - {L^dagger L, e}/2)`.
pub fn lindblad_adjoint_apply(model: &QuantumModel, x: &[f64], e: &Operator) -> Result<Operator> {
    check_square(e, model.dim, "effect")?;
    let h = model.hamiltonian_at(x)?;
    Ok(lindblad_adjoint_with(&h, model, e))
}

pub(crate) fn lindblad_adjoint_with(h: &Operator, model: &QuantumModel, e: &Operator) -> Operator {
    let mut out = commutator(h, e) * C64::new(0.0, 1.0 / model.hbar);
    for l in &model.dissipators {
        let ld = l.adjoint();
        out += matmul(&matmul(&ld, e), l);
        out -= anticommutator(&matmul(&ld, l), e) * C64::new(0.5, 0.0);
    }
    out
}

/// Which finite-step measurement operator to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrausForm {
    /// `1 + dy^T R^-1 C / 2 - (dt/8) C^dagger^T R^-1 C`, the continuum-limit operator.
    Linear,
    /// The linear form plus `(1/8) sum (w_mu w_nu - (R^-1)_{mu nu} dt) C_mu C_nu` with
    /// `w = R^-1 dy`: the second-order expansion of the square root of the Gaussian
    /// likelihood. The extra term has zero mean, so the continuum limit is unchanged,
    /// but the per-path error drops from first order to second.
    #[default]
    SecondOrder,
}

/// Continuous Gaussian measurement: channels `C_mu` and noise covariance rate `R`.
/// Build it with [`MeasurementModel::new`]; the derived operators are cached there.
#[derive(Clone, Debug)]
pub struct MeasurementModel {
    pub channels: Vec<Operator>,
    pub r: DMatrix<f64>,
    pub form: KrausForm,
    r_inv: DMatrix<f64>,
    decoherence: Operator,
    /// `C_mu C_nu`, row-major in `(mu, nu)`.
    products: Vec<Operator>,
}

impl MeasurementModel {
    pub fn new(channels: Vec<Operator>, r: DMatrix<f64>) -> Result<Self> {
        let m = channels.len();
        if m == 0 {
            return Err(Error::InvalidArgument("measurement needs at least one channel".into()));
        }
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::InvalidArgument(format!(
                "R is {}x{} but there are {m} channels",
                r.nrows(),
                r.ncols()
            )));
        }
        if (&r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) {
            return Err(Error::InvalidArgument("R must be symmetric".into()));
        }
        let chol = r.clone().cholesky().ok_or_else(|| {
            Error::InvalidArgument("R must be positive-definite (Cholesky failed)".into())
        })?;
        let dim = channels[0].nrows();
        for c in &channels {
            check_square(c, dim, "measurement channel")?;
        }
        let r_inv = chol.inverse();
        let mut decoherence = Operator::zeros(dim, dim);
        let mut products = Vec::with_capacity(m * m);
        for (mu, cm) in channels.iter().enumerate() {
            let cmd = cm.adjoint();
            for (nu, cn) in channels.iter().enumerate() {
                let w = r_inv[(mu, nu)];
                if w != 0.0 {
                    decoherence += matmul(&cmd, cn) * C64::new(w, 0.0);
                }
                products.push(matmul(cm, cn));
            }
        }
        Ok(MeasurementModel { channels, r_inv, r, form: KrausForm::default(), decoherence, products })
    }

    pub fn with_form(mut self, form: KrausForm) -> Self {
        self.form = form;
        self
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn dim(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// `C^dagger^T R^-1 C = sum_{mu nu} C_mu^dagger (R^-1)_{mu nu} C_nu`.
    pub fn decoherence_op(&self) -> Operator {
        self.decoherence.clone()
    }

    /// Weak-measurement operator in the model's [`KrausForm`].
    ///
    /// The Gaussian reference density is left out; with this convention
    /// `E_ref[M^dagger M] = 1 + O(dt^2)` under `dy ~ N(0, R dt)` for either form.
    pub fn kraus(&self, dy: &[f64], dt: f64) -> Result<Operator> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("bad step dt={dt}")));
        }
        self.build_kraus(dy, dt, self.form)
    }

    /// `M(dy) = 1 + dy^T R^-1 C / 2 - (dt/8) C^dagger^T R^-1 C` regardless of the model's form.
    pub fn kraus_linear(&self, dy: &[f64], dt: f64) -> Result<Operator> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("bad step dt={dt}")));
        }
        self.build_kraus(dy, dt, KrausForm::Linear)
    }

    /// `dt -> 0` limit of [`Self::kraus`] at a fixed, finite increment.
    pub fn kick(&self, dy: &[f64]) -> Result<Operator> {
        self.build_kraus(dy, 0.0, self.form)
    }

    fn build_kraus(&self, dy: &[f64], dt: f64, form: KrausForm) -> Result<Operator> {
        if dy.len() != self.n_channels() {
            return Err(Error::InvalidArgument(format!(
                "dy has {} components, expected {}",
                dy.len(),
                self.n_channels()
            )));
        }
        if dy.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad increment dy={dy:?}")));
        }
        let d = self.dim();
        let w = self.r_inv.transpose() * DVector::from_column_slice(dy); // (dy^T R^-1)_nu
        let mut m = Operator::identity(d, d);
        for (nu, cn) in self.channels.iter().enumerate() {
            if w[nu] != 0.0 {
                m += cn * C64::new(0.5 * w[nu], 0.0);
            }
        }
        if dt != 0.0 {
            m -= &self.decoherence * C64::new(dt / 8.0, 0.0);
        }
        if form == KrausForm::SecondOrder {
            let k = self.n_channels();
            for mu in 0..k {
                for nu in 0..k {
                    let c = 0.125 * (w[mu] * w[nu] - self.r_inv[(mu, nu)] * dt);
                    if c != 0.0 {
                        m += &self.products[mu * k + nu] * C64::new(c, 0.0);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Per-channel signal `tr[(C + C^dagger) rho] / 2`.
    pub fn expected_signal(&self, rho: &Operator) -> DVector<f64> {
        DVector::from_iterator(
            self.channels.len(),
            self.channels.iter().map(|c| crate::linalg::trace_product(&crate::linalg::hermitian_part(c), rho).re),
        )
    }
}

/// Oscillator driven by a classical force `x_1`: `H = (p^2 + w^2 q^2)/2 - x_1 q`,
/// with the free part taken as the exact spectrum `hbar w (n + 1/2)`.
pub fn driven_oscillator(fock: &FockOperators, omega: f64, hbar: f64, n_classical: usize) -> Hamiltonian {
    let dim = fock.q.nrows();
    let base = Operator::from_diagonal(&DVector::from_iterator(
        dim,
        (0..dim).map(|n| C64::new(hbar * omega * (n as f64 + 0.5), 0.0)),
    ));
    let mut couplings = vec![Operator::zeros(dim, dim); n_classical.max(1)];
    couplings[0] = -fock.q.clone();
    Hamiltonian::Affine { base, couplings }
}

/// Lindblad superoperator at `x` as a `d^2 x d^2` matrix acting on column-stacked operators.
pub fn lindblad_superoperator(model: &QuantumModel, x: &[f64]) -> Result<DMatrix<C64>> {
    let d = model.dim;
    let mut s = DMatrix::<C64>::zeros(d * d, d * d);
    let h = model.hamiltonian_at(x)?;
    for col in 0..d * d {
        let mut basis = Operator::zeros(d, d);
        basis[(col % d, col / d)] = ONE;
        let out = lindblad_with(&h, model, &basis);
        for (row, v) in out.iter().enumerate() {
            s[(row, col)] = *v;
        }
    }
    Ok(s)
}
