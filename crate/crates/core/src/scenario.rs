//! Scenario description: the JSON configuration schema, presets, and the
//! assembled models used by the simulator and the estimators.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classical::{ClassicalGrid, ClassicalModel, GridAxis};
use crate::error::{Error, Result};
use crate::linalg::{Operator, C64};
use crate::operators::{
    build_fock_operators, coherent_state, KrausForm, driven_oscillator, fock_projector, pure_density, MeasurementModel,
    QuantumModel,
};

/// How each grid point's quantum block is advanced over one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagatorKind {
    /// `Exact` for Hamiltonian-only models, `Rk4` otherwise.
    #[default]
    Auto,
    /// Classical fourth-order Runge-Kutta step of `d rho/dt = L rho`.
    Rk4,
    /// `exp(-i H(x) dt / hbar)` conjugation; only valid without dissipators.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Ground,
    /// Coherent amplitude `[re, im]`.
    Coherent([f64; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DissipatorSpec {
    pub kind: DissipatorKind,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissipatorKind {
    /// `sqrt(rate) a`
    Damping,
    /// `sqrt(rate) a^dagger a`
    Dephasing,
}

fn default_hbar() -> f64 {
    1.0
}

fn default_initial_state() -> InitialState {
    InitialState::Ground
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumSpec {
    pub omega: f64,
    #[serde(default = "default_hbar")]
    pub hbar: f64,
    pub fock_dim: usize,
    /// Truncation used by the ground-truth simulator; defaults to `fock_dim`.
    #[serde(default)]
    pub truth_fock_dim: Option<usize>,
    #[serde(default = "default_initial_state")]
    pub initial_state: InitialState,
    #[serde(default)]
    pub dissipators: Vec<DissipatorSpec>,
    #[serde(default)]
    pub propagator: PropagatorKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicalPreset {
    /// Ornstein-Uhlenbeck force `dx = -lambda x dt + sigma dW`.
    OuForce,
    /// Unknown constant force.
    Constant,
    /// `dx = sigma dW`.
    RandomWalk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalSpec {
    pub preset: ClassicalPreset,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub initial_mean: f64,
    /// Prior standard deviation; the OU preset defaults to its stationary value.
    #[serde(default)]
    pub initial_std: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementPreset {
    /// `C = q`.
    Position,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub preset: MeasurementPreset,
    pub r: f64,
    #[serde(default)]
    pub kraus: KrausForm,
}

fn default_t0() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    #[serde(default = "default_t0")]
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
}

/// Top-level configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub label: Option<String>,
    pub quantum: QuantumSpec,
    pub classical: ClassicalSpec,
    pub measurement: MeasurementSpec,
    pub grid: GridAxis,
    pub time: TimeSpec,
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|err| {
            let mut path = err.path().to_string();
            let inner = err.into_inner();
            let message = inner.to_string();
            if let Some(field) = message.strip_prefix("missing field `").and_then(|s| s.split('`').next()) {
                path = if path == "." || path.is_empty() { field.to_string() } else { format!("{path}.{field}") };
            }
            Error::Config { path, message }
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ScenarioConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialization (with defaults filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Oscillator + OU force preset used throughout the tests and examples.
    pub fn linear_gaussian_preset() -> Self {
        let lambda: f64 = 0.2;
        let sigma = 0.5;
        let sd = sigma / (2.0 * lambda).sqrt();
        ScenarioConfig {
            label: Some("lg-oscillator-ou".into()),
            quantum: QuantumSpec {
                omega: 1.0,
                hbar: 1.0,
                fock_dim: 20,
                truth_fock_dim: Some(48),
                initial_state: InitialState::Ground,
                dissipators: vec![],
                propagator: PropagatorKind::Auto,
            },
            classical: ClassicalSpec {
                preset: ClassicalPreset::OuForce,
                lambda: Some(lambda),
                sigma: Some(sigma),
                initial_mean: 0.0,
                initial_std: None,
            },
            measurement: MeasurementSpec { preset: MeasurementPreset::Position, r: 0.5, kraus: KrausForm::SecondOrder },
            grid: GridAxis { min: -5.0 * sd, max: 5.0 * sd, points: 161 },
            time: TimeSpec { t0: 0.0, t_end: 10.0, dt: 1e-3 },
            snapshot_stride: None,
            seed: 1,
        }
    }
}

/// Uniform time discretization `t_i = t0 + i dt`, `i = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let span = t_end - t0;
        if !(span >= 0.0) {
            return Err(Error::InvalidArgument(format!("t_end {t_end} precedes t0 {t0}")));
        }
        let steps = (span / dt).round();
        if (steps * dt - span).abs() > 1e-9 * span.max(dt) {
            return Err(Error::InvalidArgument(format!("dt={dt} does not divide the interval {span}")));
        }
        Ok(TimeGrid { t0, dt, steps: steps as usize })
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps)
    }
}

/// Quantum-side pieces at one Fock truncation.
#[derive(Clone, Debug)]
pub struct QuantumSide {
    pub model: QuantumModel,
    pub measurement: MeasurementModel,
    pub rho0: Operator,
}

/// Fully assembled problem.
#[derive(Clone, Debug)]
pub struct Scenario {
    /// Identifier embedded in records and outputs (config hash for file-based scenarios).
    pub id: String,
    pub config: Option<ScenarioConfig>,
    pub filter: QuantumSide,
    pub truth: QuantumSide,
    pub classical: ClassicalModel,
    pub grid: ClassicalGrid,
    pub time: TimeGrid,
    pub snapshot_stride: Option<usize>,
    pub propagator: PropagatorKind,
    pub seed: u64,
}

impl Scenario {
    pub fn from_config(config: &ScenarioConfig) -> Result<Self> {
        let cfg_err = |path: &str, message: String| Error::Config { path: path.into(), message };
        let q = &config.quantum;
        if !(q.omega > 0.0) {
            return Err(cfg_err("quantum.omega", format!("must be positive, got {}", q.omega)));
        }
        if !(q.hbar > 0.0) {
            return Err(cfg_err("quantum.hbar", format!("must be positive, got {}", q.hbar)));
        }
        if q.fock_dim < 2 {
            return Err(cfg_err("quantum.fock_dim", format!("must be at least 2, got {}", q.fock_dim)));
        }
        if !(config.measurement.r > 0.0) {
            return Err(cfg_err("measurement.r", format!("must be positive, got {}", config.measurement.r)));
        }
        for (i, d) in q.dissipators.iter().enumerate() {
            if !(d.rate >= 0.0) {
                return Err(cfg_err(&format!("quantum.dissipators[{i}].rate"), "must be nonnegative".into()));
            }
        }
        if q.propagator == PropagatorKind::Exact && !q.dissipators.is_empty() {
            return Err(cfg_err("quantum.propagator", "exact propagation needs a dissipator-free model".into()));
        }
        let filter = oscillator_side(q, q.fock_dim, &config.measurement)?;
        let truth_dim = q.truth_fock_dim.unwrap_or(q.fock_dim);
        if truth_dim < 2 {
            return Err(cfg_err("quantum.truth_fock_dim", "must be at least 2".into()));
        }
        let truth = oscillator_side(q, truth_dim, &config.measurement)?;
        let classical = classical_model(&config.classical)?;
        let grid = ClassicalGrid::new(vec![config.grid.clone()]).map_err(|e| cfg_err("grid", e.to_string()))?;
        let time = TimeGrid::new(config.time.t0, config.time.t_end, config.time.dt)
            .map_err(|e| cfg_err("time", e.to_string()))?;
        if config.snapshot_stride == Some(0) {
            return Err(cfg_err("snapshot_stride", "must be at least 1".into()));
        }
        let scenario = Scenario {
            id: config.hash(),
            config: Some(config.clone()),
            filter,
            truth,
            classical,
            grid,
            time,
            snapshot_stride: config.snapshot_stride,
            propagator: q.propagator,
            seed: config.seed,
        };
        scenario.warn_on_narrow_grid();
        Ok(scenario)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Scenario::from_config(&ScenarioConfig::from_path(path)?)
    }

    fn warn_on_narrow_grid(&self) {
        for (i, ax) in self.grid.axes().iter().enumerate() {
            let sd = self.classical.initial_cov[(i, i)].sqrt();
            let m = self.classical.initial_mean[i];
            if sd > 0.0 && (m - ax.min < 5.0 * sd || ax.max - m < 5.0 * sd) {
                log::warn!(
                    "grid axis {i} spans [{}, {}], narrower than 5 prior standard deviations ({sd}) around {m}",
                    ax.min,
                    ax.max
                );
            }
        }
    }

    /// Same physics with a different filter truncation and grid resolution.
    pub fn with_resolution(&self, fock_dim: usize, grid_points: usize) -> Result<Self> {
        let mut cfg = self
            .config
            .clone()
            .ok_or_else(|| Error::InvalidArgument("resolution changes need a config-based scenario".into()))?;
        cfg.quantum.fock_dim = fock_dim;
        cfg.grid.points = grid_points;
        Scenario::from_config(&cfg)
    }

    /// Snapshot stride: configured value, else every step unless that would exceed
    /// 10^4 snapshots or the memory budget.
    pub fn effective_stride(&self) -> usize {
        if let Some(s) = self.snapshot_stride {
            return s.max(1);
        }
        default_stride(self.time.steps, self.grid.len(), self.filter.model.dim)
    }
}

/// Snapshot memory budget for the default stride.
pub const SNAPSHOT_BUDGET_BYTES: usize = 512 << 20;

pub fn default_stride(steps: usize, grid_points: usize, dim: usize) -> usize {
    let bytes_per = grid_points * dim * dim * std::mem::size_of::<C64>();
    let by_count = steps.div_ceil(10_000).max(1);
    let by_memory = ((steps + 1) * bytes_per).div_ceil(SNAPSHOT_BUDGET_BYTES).max(1);
    by_count.max(by_memory)
}

fn oscillator_side(q: &QuantumSpec, dim: usize, meas: &MeasurementSpec) -> Result<QuantumSide> {
    let fock = build_fock_operators(dim, q.omega, q.hbar)?;
    let hamiltonian = driven_oscillator(&fock, q.omega, q.hbar, 1);
    let dissipators = q
        .dissipators
        .iter()
        .map(|d| {
            let op = match d.kind {
                DissipatorKind::Damping => fock.a.clone(),
                DissipatorKind::Dephasing => &fock.a_dag * &fock.a,
            };
            op * C64::new(d.rate.sqrt(), 0.0)
        })
        .collect();
    let model = QuantumModel::new(dim, hamiltonian, dissipators, q.hbar)?;
    let measurement =
        MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, meas.r))?.with_form(meas.kraus);
    let rho0 = match q.initial_state {
        InitialState::Ground => fock_projector(dim, 0),
        InitialState::Coherent([re, im]) => pure_density(&coherent_state(dim, C64::new(re, im))),
    };
    Ok(QuantumSide { model, measurement, rho0 })
}

fn classical_model(spec: &ClassicalSpec) -> Result<ClassicalModel> {
    let need = |v: Option<f64>, key: &str| {
        v.ok_or_else(|| Error::Config { path: format!("classical.{key}"), message: "missing field".into() })
    };
    let positive = |v: f64, key: &str| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config { path: format!("classical.{key}"), message: format!("must be positive, got {v}") })
        }
    };
    let (lambda, sigma, default_std) = match spec.preset {
        ClassicalPreset::OuForce => {
            let lambda = positive(need(spec.lambda, "lambda")?, "lambda")?;
            let sigma = positive(need(spec.sigma, "sigma")?, "sigma")?;
            (lambda, sigma, Some(sigma / (2.0 * lambda).sqrt()))
        }
        ClassicalPreset::Constant => (0.0, 0.0, None),
        ClassicalPreset::RandomWalk => (0.0, positive(need(spec.sigma, "sigma")?, "sigma")?, None),
    };
    let std = match spec.initial_std.or(default_std) {
        Some(s) => positive(s, "initial_std")?,
        None => return Err(Error::Config { path: "classical.initial_std".into(), message: "missing field".into() }),
    };
    ClassicalModel::new(
        crate::classical::Drift::Linear { matrix: DMatrix::from_element(1, 1, -lambda), offset: DVector::zeros(1) },
        crate::classical::NoiseGain::Constant(DMatrix::from_element(1, 1, sigma)),
        crate::classical::WienerCov::Constant(DMatrix::identity(1, 1)),
        DVector::from_element(1, spec.initial_mean),
        DMatrix::from_element(1, 1, std * std),
    )
}
