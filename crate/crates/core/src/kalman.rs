//! Linear-Gaussian reduction of the driven, position-measured oscillator and the
//! matching Kalman-Bucy filter, backward information filter and two-filter smoother.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scenario::{InitialState, Scenario};

/// `dX = (F X + b) dt + dW_N`, `dy = H X dt + dV_R` on `X = (q, p, x_1.., x_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Process-noise covariance rate.
    pub n: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

/// Index of the first classical component in the state vector.
pub const CLASSICAL_OFFSET: usize = 2;

impl LinearGaussianModel {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.state_dim();
        let m = self.h.nrows();
        let shapes_ok = self.f.shape() == (s, s)
            && self.b.len() == s
            && self.n.shape() == (s, s)
            && self.h.ncols() == s
            && self.r.shape() == (m, m)
            && self.mean0.len() == s
            && self.cov0.shape() == (s, s);
        if !shapes_ok {
            return Err(Error::InvalidArgument("linear-Gaussian model matrices have inconsistent shapes".into()));
        }
        if self.n.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
            return Err(Error::InvalidArgument("process noise N must be positive-semidefinite".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("R must be positive-definite".into()));
        }
        Ok(())
    }
}

/// Gaussian-state reduction of a position-measured oscillator driven by `x_1`:
/// `dq = p dt`, `dp = (-omega^2 q + x_1) dt + back-action`, `dx = A x dt + B dW`,
/// with momentum diffusion `hbar^2 / (4 R)`.
pub fn derive_lg_model(scenario: &Scenario) -> Result<LinearGaussianModel> {
    let cfg = scenario
        .config
        .as_ref()
        .ok_or_else(|| Error::UnsupportedScenario("only oscillator scenarios built from a config reduce to a linear-Gaussian model".into()))?;
    if !cfg.quantum.dissipators.is_empty() {
        return Err(Error::UnsupportedScenario(
            "dissipators break the linear-Gaussian reduction (only the measurement back-action is allowed)".into(),
        ));
    }
    let (a, offset, gain, q) = scenario.classical.linear_parts().ok_or_else(|| {
        Error::UnsupportedScenario("classical drift must be linear with constant noise gain".into())
    })?;
    let omega = cfg.quantum.omega;
    let hbar = cfg.quantum.hbar;
    let r = scenario.filter.measurement.r.clone();
    if r.nrows() != 1 {
        return Err(Error::UnsupportedScenario("expected a single position channel".into()));
    }
    let (q0, p0) = match cfg.quantum.initial_state {
        InitialState::Ground => (0.0, 0.0),
        InitialState::Coherent([re, im]) => ((2.0 * hbar / omega).sqrt() * re, (2.0 * hbar * omega).sqrt() * im),
    };
    oscillator_lg_model(
        omega,
        hbar,
        r,
        &a,
        &offset,
        &(&gain * q * gain.transpose()),
        [q0, p0],
        &scenario.classical.initial_mean,
        &scenario.classical.initial_cov,
    )
}

/// Builds the reduced model from its physical parameters; the oscillator starts in a
/// minimum-uncertainty state centred on `qp0`.
#[allow(clippy::too_many_arguments)]
pub fn oscillator_lg_model(
    omega: f64,
    hbar: f64,
    r: DMatrix<f64>,
    a: &DMatrix<f64>,
    offset: &DVector<f64>,
    diffusion: &DMatrix<f64>,
    qp0: [f64; 2],
    x_mean0: &DVector<f64>,
    x_cov0: &DMatrix<f64>,
) -> Result<LinearGaussianModel> {
    let nx = a.nrows();
    let s = CLASSICAL_OFFSET + nx;
    let mut f = DMatrix::zeros(s, s);
    f[(0, 1)] = 1.0;
    f[(1, 0)] = -omega * omega;
    f[(1, CLASSICAL_OFFSET)] = 1.0;
    f.view_mut((CLASSICAL_OFFSET, CLASSICAL_OFFSET), (nx, nx)).copy_from(a);
    let mut b = DVector::zeros(s);
    b.rows_mut(CLASSICAL_OFFSET, nx).copy_from(offset);
    let mut n = DMatrix::zeros(s, s);
    n[(1, 1)] = hbar * hbar / (4.0 * r[(0, 0)]);
    n.view_mut((CLASSICAL_OFFSET, CLASSICAL_OFFSET), (nx, nx)).copy_from(diffusion);
    let mut h = DMatrix::zeros(1, s);
    h[(0, 0)] = 1.0;
    let mut mean0 = DVector::zeros(s);
    mean0[0] = qp0[0];
    mean0[1] = qp0[1];
    mean0.rows_mut(CLASSICAL_OFFSET, nx).copy_from(x_mean0);
    let mut cov0 = DMatrix::zeros(s, s);
    cov0[(0, 0)] = hbar / (2.0 * omega);
    cov0[(1, 1)] = hbar * omega / 2.0;
    cov0.view_mut((CLASSICAL_OFFSET, CLASSICAL_OFFSET), (nx, nx)).copy_from(x_cov0);
    let model = LinearGaussianModel { f, b, n, h, r, mean0, cov0 };
    model.validate()?;
    Ok(model)
}

/// Mean and covariance at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEstimate {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianEstimate {
    /// Mean and covariance of the classical block.
    pub fn classical(&self) -> (DVector<f64>, DMatrix<f64>) {
        let nx = self.mean.len() - CLASSICAL_OFFSET;
        (
            self.mean.rows(CLASSICAL_OFFSET, nx).into_owned(),
            self.cov.view((CLASSICAL_OFFSET, CLASSICAL_OFFSET), (nx, nx)).into_owned(),
        )
    }
}

/// Backward information state: the record's likelihood is `exp(-x^T Y x / 2 + z^T x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Information {
    pub t: f64,
    pub y: DMatrix<f64>,
    pub z: DVector<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_psd(m: &DMatrix<f64>, what: &str, step: usize) -> Result<()> {
    let scale = m.amax().max(1.0);
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    if min < -1e-9 * scale || !min.is_finite() {
        return Err(Error::NumericalInstability(format!(
            "{what} lost positive-semidefiniteness at step {step} (min eigenvalue {min:e}); try a smaller dt"
        )));
    }
    Ok(())
}

/// Euler integration of the Kalman-Bucy filter over `dy`; returns `t_0 ..= t_N`.
pub fn kalman_bucy_forward(model: &LinearGaussianModel, t0: f64, dt: f64, dy: &[Vec<f64>]) -> Result<Vec<GaussianEstimate>> {
    let r_inv = model.r.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    let ht_rinv = model.h.transpose() * &r_inv;
    let info = &ht_rinv * &model.h;
    let mut m = model.mean0.clone();
    let mut p = model.cov0.clone();
    let mut out = Vec::with_capacity(dy.len() + 1);
    out.push(GaussianEstimate { t: t0, mean: m.clone(), cov: p.clone() });
    for (i, d) in dy.iter().enumerate() {
        let d = DVector::from_column_slice(d);
        let gain = &p * &ht_rinv;
        let innovation = d - &model.h * &m * dt;
        m = &m + (&model.f * &m + &model.b) * dt + gain * innovation;
        let dp = &model.f * &p + &p * model.f.transpose() + &model.n - &p * &info * &p;
        p = symmetrize(&(&p + dp * dt));
        check_psd(&p, "filter covariance", i)?;
        out.push(GaussianEstimate { t: t0 + (i + 1) as f64 * dt, mean: m.clone(), cov: p.clone() });
    }
    Ok(out)
}

/// Running log-likelihood ratio of the record against pure noise,
/// `sum_i (H m_i)^T R^-1 dy_i - (H m_i)^T R^-1 (H m_i) dt / 2`, with `m_i` the
/// estimate before increment `i`. Returns `t_0 ..= t_N`.
pub fn kalman_log_likelihood(
    model: &LinearGaussianModel,
    filtered: &[GaussianEstimate],
    dt: f64,
    dy: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if filtered.len() != dy.len() + 1 {
        return Err(Error::InvalidArgument("need one filter estimate per increment plus the prior".into()));
    }
    let r_inv = model.r.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(filtered.len());
    out.push(0.0);
    for (est, d) in filtered.iter().zip(dy) {
        let pred = &model.h * &est.mean;
        let w = &r_inv * &pred;
        acc += w.dot(&DVector::from_column_slice(d)) - 0.5 * w.dot(&pred) * dt;
        out.push(acc);
    }
    Ok(out)
}

/// Backward information filter from `Y(T) = 0, z(T) = 0` in reversed time.
/// Each step is the information-form pull-back through `Phi = I + F dt` with noise
/// `N dt`, which agrees with an Euler step of
/// `-dY = (F^T Y + Y F - Y N Y + H^T R^-1 H) dt`, `-dz = ((F^T - Y N) z - Y b) dt + H^T R^-1 dy`
/// to first order and keeps `Y` positive-semidefinite when it is rank-deficient.
/// Returns `t_0 ..= t_N` in increasing time order.
pub fn kalman_bucy_backward(model: &LinearGaussianModel, t0: f64, dt: f64, dy: &[Vec<f64>]) -> Result<Vec<Information>> {
    let s = model.state_dim();
    let r_inv = model.r.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    let ht_rinv = model.h.transpose() * &r_inv;
    let info = &ht_rinv * &model.h;
    let phi = DMatrix::identity(s, s) + &model.f * dt;
    let q = &model.n * dt;
    let b = &model.b * dt;
    let steps = dy.len();
    let mut y = DMatrix::zeros(s, s);
    let mut z = DVector::zeros(s);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(Information { t: t0 + steps as f64 * dt, y: y.clone(), z: z.clone() });
    for i in (0..steps).rev() {
        let d = DVector::from_column_slice(&dy[i]);
        let a = (DMatrix::identity(s, s) + &y * &q)
            .try_inverse()
            .ok_or_else(|| Error::NumericalInstability(format!("I + Y N dt is singular at step {i}")))?;
        z = phi.transpose() * &a * (&z - &y * &b) + &ht_rinv * d;
        y = symmetrize(&(phi.transpose() * &a * &y * &phi + &info * dt));
        check_psd(&y, "backward information", i)?;
        out.push(Information { t: t0 + i as f64 * dt, y: y.clone(), z: z.clone() });
    }
    out.reverse();
    Ok(out)
}

/// Two-filter combination `P_s = (P_f^-1 + Y)^-1`, `m_s = P_s (P_f^-1 m_f + z)`.
pub fn mfp_combine(fwd: &GaussianEstimate, bwd: &Information) -> Result<GaussianEstimate> {
    if fwd.cov.shape() != bwd.y.shape() || fwd.mean.len() != bwd.z.len() {
        return Err(Error::InvalidArgument("forward and backward shapes differ".into()));
    }
    let pf_inv = fwd
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument(format!("filter covariance at t={} is singular", fwd.t)))?
        .inverse();
    let info = symmetrize(&(&pf_inv + &bwd.y));
    let ps = info
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument(format!("combined information at t={} is singular", fwd.t)))?
        .inverse();
    let mean = &ps * (&pf_inv * &fwd.mean + &bwd.z);
    Ok(GaussianEstimate { t: fwd.t, mean, cov: symmetrize(&ps) })
}

/// Filtered and smoothed Gaussian references over a record.
#[derive(Clone, Debug)]
pub struct KalmanSmoothing {
    pub filtered: Vec<GaussianEstimate>,
    pub backward: Vec<Information>,
    pub smoothed: Vec<GaussianEstimate>,
}

pub fn kalman_smoother(model: &LinearGaussianModel, t0: f64, dt: f64, dy: &[Vec<f64>]) -> Result<KalmanSmoothing> {
    let filtered = kalman_bucy_forward(model, t0, dt, dy)?;
    let backward = kalman_bucy_backward(model, t0, dt, dy)?;
    let smoothed = filtered.iter().zip(&backward).map(|(f, b)| mfp_combine(f, b)).collect::<Result<Vec<_>>>()?;
    Ok(KalmanSmoothing { filtered, backward, smoothed })
}

/// Residual of the continuous algebraic Riccati equation at `p`.
pub fn riccati_residual(model: &LinearGaussianModel, p: &DMatrix<f64>) -> f64 {
    let r_inv = model.r.clone().try_inverse().expect("R is invertible");
    let res = &model.f * p + p * model.f.transpose() + &model.n - p * model.h.transpose() * r_inv * &model.h * p;
    res.amax()
}

/// Exact transition and integrated noise over `dt` (Van Loan).
pub fn exact_discretization(model: &LinearGaussianModel, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = model.state_dim();
    let mut m = DMatrix::zeros(2 * s, 2 * s);
    m.view_mut((0, 0), (s, s)).copy_from(&(-&model.f * dt));
    m.view_mut((0, s), (s, s)).copy_from(&(&model.n * dt));
    m.view_mut((s, s), (s, s)).copy_from(&(model.f.transpose() * dt));
    let e = m.exp();
    let phi = e.view((s, s), (s, s)).transpose();
    let qd = &phi * e.view((0, s), (s, s));
    (phi, symmetrize(&qd))
}

/// Discrete model `x_{i+1} = Phi x_i + b + w_i`, `y_i = H x_i + v_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLg {
    pub phi: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

impl DiscreteLg {
    /// Exact sampling of the continuous model every `dt`, with `y_i = dy_i / dt`
    /// observed through noise of covariance `R / dt`.
    pub fn from_continuous(model: &LinearGaussianModel, dt: f64) -> Self {
        let (phi, q) = exact_discretization(model, dt);
        let s = model.state_dim();
        // integrated drift offset: int_0^dt exp(F u) du b, via the augmented exponential
        let mut aug = DMatrix::zeros(s + 1, s + 1);
        aug.view_mut((0, 0), (s, s)).copy_from(&(&model.f * dt));
        aug.view_mut((0, s), (s, 1)).copy_from(&(&model.b * dt));
        let b = aug.exp().view((0, s), (s, 1)).into_owned().column(0).into_owned();
        DiscreteLg {
            phi,
            b,
            q,
            h: model.h.clone(),
            r: &model.r / dt,
            mean0: model.mean0.clone(),
            cov0: model.cov0.clone(),
        }
    }
}

/// Predicted estimates `x_i | y_0..y_{i-1}` for `i = 0..=N` (Joseph-form updates).
pub fn discrete_filter(model: &DiscreteLg, ys: &[DVector<f64>]) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let s = model.phi.nrows();
    let mut m = model.mean0.clone();
    let mut p = model.cov0.clone();
    let mut out = vec![(m.clone(), p.clone())];
    for y in ys {
        let sk = &model.h * &p * model.h.transpose() + &model.r;
        let sk_inv = sk.try_inverse().ok_or_else(|| Error::InvalidArgument("innovation covariance is singular".into()))?;
        let k = &p * model.h.transpose() * sk_inv;
        m = &m + &k * (y - &model.h * &m);
        let ikh = DMatrix::identity(s, s) - &k * &model.h;
        p = symmetrize(&(&ikh * &p * ikh.transpose() + &k * &model.r * k.transpose()));
        m = &model.phi * m + &model.b;
        p = symmetrize(&(&model.phi * p * model.phi.transpose() + &model.q));
        out.push((m.clone(), p.clone()));
    }
    Ok(out)
}

/// Information about `x_i` carried by `y_i..y_{N-1}`, for `i = 0..=N`.
pub fn discrete_backward(model: &DiscreteLg, ys: &[DVector<f64>]) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let s = model.phi.nrows();
    let r_inv = model.r.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    let mut y = DMatrix::zeros(s, s);
    let mut z = DVector::zeros(s);
    let mut out = vec![(y.clone(), z.clone())];
    for obs in ys.iter().rev() {
        // pull back through the transition, then add the measurement at x_i
        let a = (DMatrix::identity(s, s) + &y * &model.q)
            .try_inverse()
            .ok_or_else(|| Error::NumericalInstability("I + Y Q is singular".into()))?;
        let y_prev = symmetrize(&(model.phi.transpose() * &a * &y * &model.phi));
        let z_prev = model.phi.transpose() * &a * (&z - &y * &model.b);
        y = y_prev + model.h.transpose() * &r_inv * &model.h;
        z = z_prev + model.h.transpose() * &r_inv * obs;
        out.push((y.clone(), z.clone()));
    }
    out.reverse();
    Ok(out)
}

/// Exact discrete smoother by two-filter combination.
pub fn discrete_smoother(model: &DiscreteLg, ys: &[DVector<f64>]) -> Result<Vec<GaussianEstimate>> {
    let fwd = discrete_filter(model, ys)?;
    let bwd = discrete_backward(model, ys)?;
    fwd.into_iter()
        .zip(bwd)
        .enumerate()
        .map(|(i, ((m, p), (y, z)))| {
            mfp_combine(&GaussianEstimate { t: i as f64, mean: m, cov: p }, &Information { t: i as f64, y, z })
        })
        .collect()
}
