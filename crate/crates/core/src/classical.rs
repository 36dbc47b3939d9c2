//! Classical Markov signal: Ito SDE `dx = A(x,t) dt + B(x,t) dW`, Euler-Maruyama
//! sample paths, and grid transition kernels.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DriftFn = Arc<dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync>;
pub type GainFn = Arc<dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync>;
pub type CovFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Drift `A(x, t)`.
#[derive(Clone)]
pub enum Drift {
    /// `A(x) = matrix x + offset`.
    Linear { matrix: DMatrix<f64>, offset: DVector<f64> },
    Custom(DriftFn),
}

/// Noise gain `B(x, t)`.
#[derive(Clone)]
pub enum NoiseGain {
    Constant(DMatrix<f64>),
    Custom(GainFn),
}

/// Wiener covariance rate `Q(t)`.
#[derive(Clone)]
pub enum WienerCov {
    Constant(DMatrix<f64>),
    Custom(CovFn),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Linear { matrix, offset } => write!(f, "Linear({matrix:?}, {offset:?})"),
            Drift::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl fmt::Debug for NoiseGain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseGain::Constant(b) => write!(f, "Constant({b:?})"),
            NoiseGain::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl fmt::Debug for WienerCov {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WienerCov::Constant(q) => write!(f, "Constant({q:?})"),
            WienerCov::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Classical signal model with a Gaussian prior on `x(t0)`.
#[derive(Clone, Debug)]
pub struct ClassicalModel {
    pub n: usize,
    pub w: usize,
    pub drift: Drift,
    pub noise_gain: NoiseGain,
    pub wiener_cov: WienerCov,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl ClassicalModel {
    pub fn new(
        drift: Drift,
        noise_gain: NoiseGain,
        wiener_cov: WienerCov,
        initial_mean: DVector<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = initial_mean.len();
        if n == 0 {
            return Err(Error::InvalidArgument("classical state dimension must be positive".into()));
        }
        if initial_cov.shape() != (n, n) {
            return Err(Error::InvalidArgument("initial covariance shape does not match state".into()));
        }
        check_psd(&initial_cov, "initial covariance")?;
        if let Drift::Linear { matrix, offset } = &drift {
            if matrix.shape() != (n, n) || offset.len() != n {
                return Err(Error::InvalidArgument("linear drift shape does not match state".into()));
            }
        }
        let w = match &wiener_cov {
            WienerCov::Constant(q) => {
                check_psd(q, "Wiener covariance Q")?;
                q.nrows()
            }
            WienerCov::Custom(f) => f(0.0).nrows(),
        };
        if let NoiseGain::Constant(b) = &noise_gain {
            if b.shape() != (n, w) {
                return Err(Error::InvalidArgument(format!(
                    "noise gain is {}x{}, expected {n}x{w}",
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        Ok(ClassicalModel { n, w, drift, noise_gain, wiener_cov, initial_mean, initial_cov })
    }

    /// Scalar Ornstein-Uhlenbeck process `dx = -lambda x dt + sigma dW`, `Q = 1`.
    pub fn ornstein_uhlenbeck(lambda: f64, sigma: f64, mean0: f64, var0: f64) -> Result<Self> {
        ClassicalModel::new(
            Drift::Linear { matrix: DMatrix::from_element(1, 1, -lambda), offset: DVector::zeros(1) },
            NoiseGain::Constant(DMatrix::from_element(1, 1, sigma)),
            WienerCov::Constant(DMatrix::identity(1, 1)),
            DVector::from_element(1, mean0),
            DMatrix::from_element(1, 1, var0),
        )
    }

    pub fn drift_at(&self, x: &[f64], t: f64) -> DVector<f64> {
        match &self.drift {
            Drift::Linear { matrix, offset } => matrix * DVector::from_column_slice(x) + offset,
            Drift::Custom(f) => f(x, t),
        }
    }

    pub fn gain_at(&self, x: &[f64], t: f64) -> DMatrix<f64> {
        match &self.noise_gain {
            NoiseGain::Constant(b) => b.clone(),
            NoiseGain::Custom(f) => f(x, t),
        }
    }

    pub fn q_at(&self, t: f64) -> DMatrix<f64> {
        match &self.wiener_cov {
            WienerCov::Constant(q) => q.clone(),
            WienerCov::Custom(f) => f(t),
        }
    }

    /// Diffusion rate `B Q B^T` at `(x, t)`.
    pub fn diffusion_at(&self, x: &[f64], t: f64) -> DMatrix<f64> {
        let b = self.gain_at(x, t);
        let q = self.q_at(t);
        &b * q * b.transpose()
    }

    pub fn is_time_invariant(&self) -> bool {
        !matches!(self.drift, Drift::Custom(_))
            && !matches!(self.noise_gain, NoiseGain::Custom(_))
            && !matches!(self.wiener_cov, WienerCov::Custom(_))
    }

    /// `(A, B, Q)` when the model is linear with constant gain and covariance.
    pub fn linear_parts(&self) -> Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        match (&self.drift, &self.noise_gain, &self.wiener_cov) {
            (Drift::Linear { matrix, offset }, NoiseGain::Constant(b), WienerCov::Constant(q)) => {
                Some((matrix.clone(), offset.clone(), b.clone(), q.clone()))
            }
            _ => None,
        }
    }
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("{what} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::InvalidArgument(format!("{what} must be symmetric")));
    }
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    if min < -1e-12 * (1.0 + m.amax()) {
        return Err(Error::InvalidArgument(format!("{what} must be positive-semidefinite (min eigenvalue {min:e})")));
    }
    Ok(())
}

/// One Euler-Maruyama step `x + A(x,t) dt + B(x,t) dW`; `dW` must have covariance `Q dt`.
pub fn euler_maruyama_step(model: &ClassicalModel, x: &[f64], t: f64, dt: f64, dw: &[f64]) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if x.len() != model.n || dw.len() != model.w {
        return Err(Error::InvalidArgument("state or Wiener increment has wrong length".into()));
    }
    let next = DVector::from_column_slice(x)
        + model.drift_at(x, t) * dt
        + model.gain_at(x, t) * DVector::from_column_slice(dw);
    if let Some(i) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow(format!("Euler-Maruyama produced non-finite x[{i}] at t={t}")));
    }
    Ok(next)
}

/// One axis of a uniform grid.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.points - 1) as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }
}

/// Uniform tensor-product grid over the classical state space. Flat index
/// runs fastest over the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalGrid {
    axes: Vec<GridAxis>,
    points: Vec<Vec<f64>>,
}

impl ClassicalGrid {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        for (i, ax) in axes.iter().enumerate() {
            if !(ax.min < ax.max) || !ax.min.is_finite() || !ax.max.is_finite() {
                return Err(Error::InvalidGrid(format!("axis {i}: need min < max, got [{}, {}]", ax.min, ax.max)));
            }
            if ax.points < 2 {
                return Err(Error::InvalidGrid(format!("axis {i}: need at least 2 points, got {}", ax.points)));
            }
        }
        let total: usize = axes.iter().map(|a| a.points).product();
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut x = Vec::with_capacity(axes.len());
            for ax in &axes {
                x.push(ax.coordinate(rem % ax.points));
                rem /= ax.points;
            }
            points.push(x);
        }
        Ok(ClassicalGrid { axes, points })
    }

    pub fn uniform_1d(min: f64, max: f64, points: usize) -> Result<Self> {
        ClassicalGrid::new(vec![GridAxis { min, max, points }])
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing()).product()
    }

    pub fn spacings(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.spacing()).collect()
    }

    fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (ax, &i) in self.axes.iter().zip(multi) {
            flat += i * stride;
            stride *= ax.points;
        }
        flat
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.axes
            .iter()
            .map(|ax| {
                let i = flat % ax.points;
                flat /= ax.points;
                i
            })
            .collect()
    }

    /// Mean and covariance of a grid density `p` (values per unit volume).
    pub fn moments(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let vol = self.cell_volume();
        let mut mean = DVector::zeros(n);
        for (k, &pk) in p.iter().enumerate() {
            for i in 0..n {
                mean[i] += pk * vol * self.points[k][i];
            }
        }
        let mut cov = DMatrix::zeros(n, n);
        for (k, &pk) in p.iter().enumerate() {
            for i in 0..n {
                let di = self.points[k][i] - mean[i];
                for j in 0..n {
                    cov[(i, j)] += pk * vol * di * (self.points[k][j] - mean[j]);
                }
            }
        }
        (mean, (&cov + cov.transpose()) * 0.5)
    }

    /// Gaussian density sampled on the grid and normalized to unit mass.
    /// Returns the density and the analytic mass that falls outside the grid box.
    pub fn gaussian_density(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
        let n = self.dim();
        let spacings = self.spacings();
        let diag_only = (0..n).all(|i| (0..n).all(|j| i == j || cov[(i, j)] == 0.0));
        let mut off_grid = 0.0;
        let weights: Vec<f64> = if diag_only {
            let mut per_axis = Vec::with_capacity(n);
            for (i, ax) in self.axes.iter().enumerate() {
                let var = cov[(i, i)];
                let sd = var.sqrt();
                if sd > 0.0 {
                    let lo = normal_cdf((ax.min - spacings[i] / 2.0 - mean[i]) / sd);
                    let hi = normal_cdf((ax.max + spacings[i] / 2.0 - mean[i]) / sd);
                    off_grid = f64::max(off_grid, 1.0 - (hi - lo));
                }
                per_axis.push(axis_weights(ax, mean[i], var));
            }
            (0..self.len())
                .map(|k| self.multi_index(k).iter().enumerate().map(|(i, &j)| per_axis[i][j]).product())
                .collect()
        } else {
            let inv = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("prior covariance must be positive-definite".into()))?
                .inverse();
            self.points
                .iter()
                .map(|x| {
                    let dx = DVector::from_column_slice(x) - mean;
                    (-0.5 * (dx.transpose() * &inv * &dx)[0]).exp()
                })
                .collect()
        };
        let mass: f64 = weights.iter().sum::<f64>() * self.cell_volume();
        if !(mass > 0.0) {
            return Err(Error::InvalidGrid("prior has no mass on the grid".into()));
        }
        Ok((weights.into_iter().map(|w| w / mass).collect(), off_grid))
    }
}

/// Weights of a 1-D Gaussian on an axis; a point mass (variance 0 or below the
/// resolution) falls back to linear interpolation.
fn axis_weights(ax: &GridAxis, mean: f64, var: f64) -> Vec<f64> {
    let h = ax.spacing();
    let mut w = vec![0.0; ax.points];
    if var.sqrt() < 0.5 * h {
        let u = ((mean - ax.min) / h).clamp(0.0, (ax.points - 1) as f64);
        let j0 = (u.floor() as usize).min(ax.points - 2);
        let phi = u - j0 as f64;
        w[j0] = 1.0 - phi;
        w[j0 + 1] += phi;
    } else {
        for (j, wj) in w.iter_mut().enumerate() {
            let z = (ax.coordinate(j) - mean) / var.sqrt();
            *wj = (-0.5 * z * z).exp();
        }
    }
    w
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, |rel err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Row-stochastic transition matrix on a grid, stored by rows:
/// `rows[k]` lists `(j, K[k -> j])` with nonzero weight.
#[derive(Clone, Debug)]
pub struct TransitionKernel {
    rows: Vec<Vec<(usize, f64)>>,
    /// Transposed adjacency: `cols[j]` lists `(k, K[k -> j])`.
    cols: Vec<Vec<(usize, f64)>>,
    /// Rows whose mean displacement landed outside the grid and was clamped.
    pub clamped_rows: usize,
}

impl TransitionKernel {
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let k = rows.len();
        let mut cols = vec![Vec::new(); k];
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                cols[j].push((i, w));
            }
        }
        TransitionKernel { rows, cols, clamped_rows: 0 }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect())
            .collect();
        TransitionKernel::from_rows(rows)
    }

    pub fn identity(k: usize) -> Self {
        TransitionKernel::from_rows((0..k).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, k: usize) -> &[(usize, f64)] {
        &self.rows[k]
    }

    /// Entries landing in `j`, as `(source k, K[k -> j])`.
    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.cols[j]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.len();
        let mut m = DMatrix::zeros(k, k);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[(i, j)] += w;
            }
        }
        m
    }

    /// Mass transport `p'_j = sum_k K[k -> j] p_k`.
    pub fn push_forward(&self, p: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|col| col.iter().map(|&(k, w)| w * p[k]).sum()).collect()
    }

    /// Expectation pull-back `g'_k = sum_j K[k -> j] g_j`.
    pub fn pull_back(&self, g: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|&(j, w)| w * g[j]).sum()).collect()
    }
}

const KERNEL_TAIL_SD: f64 = 8.0;

/// Transition kernel for one step of length `dt` starting at time `t`.
///
/// Each row carries the law of `x_k + A dt + B dW`. When the step standard
/// deviation along an axis resolves the grid spacing, the row is the Gaussian
/// density sampled on the grid and renormalized. Below the spacing, a sampled
/// Gaussian no longer carries the right moments, and the row becomes the
/// nonnegative stencil that reproduces the step mean and variance exactly
/// (linear interpolation of the mean, then a symmetric three-point spread).
/// Mass leaving the grid is folded back onto the boundary nodes.
pub fn transition_kernel(model: &ClassicalModel, grid: &ClassicalGrid, t: f64, dt: f64) -> Result<TransitionKernel> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if grid.dim() != model.n {
        return Err(Error::InvalidArgument(format!(
            "grid has {} axes but the state has {} components",
            grid.dim(),
            model.n
        )));
    }
    let n = grid.dim();
    let spacings = grid.spacings();
    let mut clamped = 0usize;
    let mut rows = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let x = grid.point(k);
        let drift = model.drift_at(x, t);
        let cov = model.diffusion_at(x, t) * dt;
        if drift.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow(format!("non-finite drift or diffusion at grid point {k}")));
        }
        let mean: Vec<f64> = (0..n).map(|i| x[i] + drift[i] * dt).collect();
        let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || cov[(i, j)].abs() <= 1e-300));
        let mut landed_off = false;
        for (i, ax) in grid.axes().iter().enumerate() {
            if mean[i] < ax.min || mean[i] > ax.max {
                landed_off = true;
            }
        }
        if landed_off {
            clamped += 1;
        }
        let row = if diagonal {
            let per_axis: Vec<Vec<(usize, f64)>> = grid
                .axes()
                .iter()
                .enumerate()
                .map(|(i, ax)| axis_row(ax, mean[i], cov[(i, i)].max(0.0), spacings[i]))
                .collect();
            tensor_row(grid, &per_axis)
        } else {
            gaussian_row(grid, &mean, &cov)?
        };
        rows.push(row);
    }
    if clamped > 0 {
        log::warn!("transition kernel: {clamped} rows had their drift target clamped to the grid boundary");
    }
    let mut kernel = TransitionKernel::from_rows(rows);
    kernel.clamped_rows = clamped;
    Ok(kernel)
}

fn axis_row(ax: &GridAxis, mean: f64, var: f64, h: f64) -> Vec<(usize, f64)> {
    let last = ax.points - 1;
    let mut acc: HashMap<usize, f64> = HashMap::new();
    let sd = var.sqrt();
    if sd >= h {
        let lo = ((mean - KERNEL_TAIL_SD * sd - ax.min) / h).floor().max(0.0) as usize;
        let hi = (((mean + KERNEL_TAIL_SD * sd - ax.min) / h).ceil().max(0.0) as usize).min(last);
        let mut total = 0.0;
        for j in lo..=hi {
            let z = (ax.coordinate(j) - mean) / sd;
            let w = (-0.5 * z * z).exp();
            total += w;
            *acc.entry(j).or_default() += w;
        }
        if total <= 0.0 {
            // whole Gaussian beyond the boundary
            let j = if mean < ax.min { 0 } else { last };
            return vec![(j, 1.0)];
        }
        let mut row: Vec<(usize, f64)> = acc.into_iter().map(|(j, w)| (j, w / total)).collect();
        row.sort_by_key(|e| e.0);
        return row;
    }
    let u = (mean - ax.min) / h;
    let base = u.floor();
    let phi = u - base;
    let spread = (var / (h * h) - phi * (1.0 - phi)).max(0.0);
    let clamp = |j: isize| -> usize { j.clamp(0, last as isize) as usize };
    let j0 = base as isize;
    for (offset, interp) in [(0isize, 1.0 - phi), (1, phi)] {
        if interp == 0.0 {
            continue;
        }
        let centre = j0 + offset;
        for (shift, w) in [(-1isize, spread / 2.0), (0, 1.0 - spread), (1, spread / 2.0)] {
            if w != 0.0 {
                *acc.entry(clamp(centre + shift)).or_default() += interp * w;
            }
        }
    }
    let mut row: Vec<(usize, f64)> = acc.into_iter().filter(|e| e.1 != 0.0).collect();
    row.sort_by_key(|e| e.0);
    let total: f64 = row.iter().map(|e| e.1).sum();
    row.iter_mut().for_each(|e| e.1 /= total);
    row
}

fn tensor_row(grid: &ClassicalGrid, per_axis: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
    let mut out: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    for axis in per_axis {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for (idx, w) in &out {
            for &(j, wj) in axis {
                let mut m = idx.clone();
                m.push(j);
                next.push((m, w * wj));
            }
        }
        out = next;
    }
    let mut row: Vec<(usize, f64)> = out.into_iter().map(|(m, w)| (grid.flat_index(&m), w)).collect();
    row.sort_by_key(|e| e.0);
    row
}

fn gaussian_row(grid: &ClassicalGrid, mean: &[f64], cov: &DMatrix<f64>) -> Result<Vec<(usize, f64)>> {
    let inv = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("correlated diffusion must be positive-definite".into()))?
        .inverse();
    let mut row = Vec::new();
    let mut total = 0.0;
    for k in 0..grid.len() {
        let dx = DVector::from_iterator(mean.len(), grid.point(k).iter().zip(mean).map(|(a, b)| a - b));
        let q = (dx.transpose() * &inv * &dx)[0];
        if q <= KERNEL_TAIL_SD * KERNEL_TAIL_SD {
            let w = (-0.5 * q).exp();
            total += w;
            row.push((k, w));
        }
    }
    if total <= 0.0 {
        // nearest node
        let k = (0..grid.len())
            .min_by(|&a, &b| {
                let da: f64 = grid.point(a).iter().zip(mean).map(|(x, m)| (x - m).powi(2)).sum();
                let db: f64 = grid.point(b).iter().zip(mean).map(|(x, m)| (x - m).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        return Ok(vec![(k, 1.0)]);
    }
    row.iter_mut().for_each(|e| e.1 /= total);
    Ok(row)
}

/// Kernels keyed by `(t, dt)`; time-invariant models share one entry.
pub struct KernelCache {
    model: ClassicalModel,
    grid: ClassicalGrid,
    entries: RwLock<HashMap<(u64, u64), Arc<TransitionKernel>>>,
    warnings: AtomicUsize,
}

impl KernelCache {
    pub fn new(model: ClassicalModel, grid: ClassicalGrid) -> Self {
        KernelCache { model, grid, entries: RwLock::new(HashMap::new()), warnings: AtomicUsize::new(0) }
    }

    pub fn get(&self, t: f64, dt: f64) -> Result<Arc<TransitionKernel>> {
        let key_t = if self.model.is_time_invariant() { 0 } else { t.to_bits() };
        let key = (key_t, dt.to_bits());
        if let Some(k) = self.entries.read().expect("kernel cache poisoned").get(&key) {
            return Ok(Arc::clone(k));
        }
        let kernel = Arc::new(transition_kernel(&self.model, &self.grid, t, dt)?);
        self.warnings.fetch_add(kernel.clamped_rows, Ordering::Relaxed);
        let mut w = self.entries.write().expect("kernel cache poisoned");
        if w.len() > 4096 {
            w.clear();
        }
        Ok(Arc::clone(w.entry(key).or_insert(kernel)))
    }

    /// Total rows clamped at the boundary across all kernels built so far.
    pub fn boundary_warnings(&self) -> usize {
        self.warnings.load(Ordering::Relaxed)
    }

    pub fn grid(&self) -> &ClassicalGrid {
        &self.grid
    }

    pub fn model(&self) -> &ClassicalModel {
        &self.model
    }
}
