//! Ground-truth generation: a sampled classical path, the quantum state
//! conditioned on that path, and the continuous measurement record.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classical::euler_maruyama_step;
use crate::engine::rk4_step;
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eigen, trace, Operator, C64};
use crate::operators::lindblad_with;
use crate::scenario::{QuantumSide, Scenario};

/// RNG stream ids within one record's generator.
const STREAM_CLASSICAL: u64 = 1;
const STREAM_MEASUREMENT: u64 = 2;
const STREAM_PRIOR: u64 = 3;

/// A simulated experiment. Row `i` covers `[t_i, t_{i+1})`: `dy[i]` is the
/// increment over that step and `x_true[i]` the signal at its end, `t_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub scenario_id: String,
    pub seed: u64,
    pub t0: f64,
    pub dt: f64,
    pub x_initial: Vec<f64>,
    pub x_true: Vec<Vec<f64>>,
    pub dy: Vec<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.dy.len()
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// True signal at `t_i`, `i = 0..=steps`.
    pub fn x_at(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.x_initial
        } else {
            &self.x_true[i - 1]
        }
    }

    /// Checks lengths and that the record was produced for `scenario`'s time grid.
    pub fn check_against(&self, scenario: &Scenario) -> Result<()> {
        if self.scenario_id != scenario.id {
            return Err(Error::ScenarioMismatch(format!(
                "record was generated for scenario {} but {} was given",
                self.scenario_id, scenario.id
            )));
        }
        self.check_time(scenario.time.t0, scenario.time.dt, scenario.time.steps)?;
        let m = scenario.filter.measurement.n_channels();
        if self.dy.iter().any(|d| d.len() != m) {
            return Err(Error::InvalidArgument(format!("record increments are not {m}-dimensional")));
        }
        Ok(())
    }

    pub fn check_time(&self, t0: f64, dt: f64, steps: usize) -> Result<()> {
        if self.dt.to_bits() != dt.to_bits() || self.t0.to_bits() != t0.to_bits() {
            return Err(Error::ScenarioMismatch(format!(
                "record time grid (t0={}, dt={}) differs from the scenario's (t0={t0}, dt={dt})",
                self.t0, self.dt
            )));
        }
        if self.x_true.len() != self.dy.len() {
            return Err(Error::InvalidArgument("record columns have different lengths".into()));
        }
        if self.steps() != steps {
            return Err(Error::ScenarioMismatch(format!(
                "record has {} steps, scenario expects {steps}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// The first `steps` increments as a shorter record.
    pub fn truncated(&self, steps: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            x_true: self.x_true[..steps].to_vec(),
            dy: self.dy[..steps].to_vec(),
            ..self.clone()
        }
    }
}

/// Per-step quantities exposed for testing the generation rule.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub step: usize,
    /// `tr[(C + C^dag) rho] / 2` before the update.
    pub signal: Vec<f64>,
    /// Injected measurement noise.
    pub noise: Vec<f64>,
    /// Trace of `rho` after renormalization.
    pub trace_after: f64,
    /// Smallest eigenvalue of `rho` after the step (computed only for mixed states).
    pub min_eigenvalue: Option<f64>,
    /// `tr[O rho]` for each operator passed to the observer, after the step.
    pub observables: Vec<f64>,
}

enum TruthState {
    Pure(DVector<C64>),
    Mixed(Operator),
}

impl TruthState {
    fn expect(&self, op: &Operator) -> C64 {
        match self {
            TruthState::Pure(psi) => (psi.adjoint() * (op * psi))[0],
            TruthState::Mixed(rho) => crate::linalg::trace_product(op, rho),
        }
    }
}

/// Simulates a record from `(scenario, seed)`.
pub fn simulate_truth(scenario: &Scenario, seed: u64) -> Result<TrajectoryRecord> {
    simulate_truth_observed(scenario, seed, &[], |_| {})
}

/// Same as [`simulate_truth`], reporting diagnostics (and expectations of `observables`) each step.
pub fn simulate_truth_observed(
    scenario: &Scenario,
    seed: u64,
    observables: &[Operator],
    mut observe: impl FnMut(&StepDiagnostics),
) -> Result<TrajectoryRecord> {
    let side: &QuantumSide = &scenario.truth;
    let classical = &scenario.classical;
    let time = scenario.time;
    let dt = time.dt;

    let stream = |id: u64| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    };
    let mut rng_classical = stream(STREAM_CLASSICAL);
    let mut rng_meas = stream(STREAM_MEASUREMENT);
    let mut rng_prior = stream(STREAM_PRIOR);

    let n = classical.n;
    let prior_chol = cholesky_psd(&classical.initial_cov);
    let z0 = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng_prior)));
    let x0 = &classical.initial_mean + &prior_chol * z0;

    let r_chol = cholesky_psd(&side.measurement.r);
    let m = side.measurement.n_channels();
    let channel_means: Vec<Operator> =
        side.measurement.channels.iter().map(crate::linalg::hermitian_part).collect();

    let mut state = initial_truth_state(side);
    let mut x = x0.as_slice().to_vec();
    let mut x_true = Vec::with_capacity(time.steps);
    let mut dys = Vec::with_capacity(time.steps);

    for step in 0..time.steps {
        let t = time.time(step);
        let signal: Vec<f64> = channel_means.iter().map(|c| state.expect(c).re).collect();
        let z = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng_meas)));
        let noise = (&r_chol * z) * dt.sqrt();
        let dy: Vec<f64> = (0..m).map(|i| signal[i] * dt + noise[i]).collect();

        // quantum Bayes update with the emitted increment, then dynamics at the true x
        let kraus = side.measurement.kraus(&dy, dt)?;
        let h = side.model.hamiltonian_at(&x)?;
        let hbar = side.model.hbar;
        state = match state {
            TruthState::Pure(psi) => {
                let psi = &kraus * psi;
                let norm2 = psi.norm_squared();
                if !(norm2 > 1e-12) || !norm2.is_finite() {
                    return Err(Error::DegenerateRecord { step, trace: norm2 });
                }
                let psi = psi / C64::new(norm2.sqrt(), 0.0);
                let minus_i = C64::new(0.0, -1.0 / hbar);
                let gen = |v: &DVector<C64>| (&h * v) * minus_i;
                let half = C64::new(dt / 2.0, 0.0);
                let k1 = gen(&psi);
                let k2 = gen(&(&psi + &k1 * half));
                let k3 = gen(&(&psi + &k2 * half));
                let k4 = gen(&(&psi + &k3 * C64::new(dt, 0.0)));
                let next = &psi + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
                let norm = next.norm();
                TruthState::Pure(next / C64::new(norm, 0.0))
            }
            TruthState::Mixed(rho) => {
                let rho = &kraus * rho * kraus.adjoint();
                let tr = trace(&rho).re;
                if !(tr > 1e-12) || !tr.is_finite() {
                    return Err(Error::DegenerateRecord { step, trace: tr });
                }
                let rho = rho / C64::new(tr, 0.0);
                let rho = rk4_step(&rho, dt, |r| lindblad_with(&h, &side.model, r));
                let rho = crate::linalg::hermitian_part(&rho);
                let tr = trace(&rho).re;
                TruthState::Mixed(rho / C64::new(tr, 0.0))
            }
        };

        let w = classical.w;
        let q = classical.q_at(t) * dt;
        let q_chol = cholesky_psd(&q);
        let zw = DVector::from_iterator(w, (0..w).map(|_| StandardNormal.sample(&mut rng_classical)));
        let dw = q_chol * zw;
        let next_x = euler_maruyama_step(classical, &x, t, dt, dw.as_slice()).map_err(|e| e.at_step(step))?;
        x = next_x.as_slice().to_vec();

        let diag = StepDiagnostics {
            step,
            signal: signal.clone(),
            noise: noise.as_slice().to_vec(),
            trace_after: match &state {
                TruthState::Pure(psi) => psi.norm_squared(),
                TruthState::Mixed(rho) => trace(rho).re,
            },
            min_eigenvalue: match &state {
                TruthState::Pure(_) => None,
                TruthState::Mixed(rho) => Some(hermitian_eigen(rho).0[0]),
            },
            observables: observables.iter().map(|o| state.expect(o).re).collect(),
        };
        observe(&diag);

        x_true.push(x.clone());
        dys.push(dy);
    }

    Ok(TrajectoryRecord {
        scenario_id: scenario.id.clone(),
        seed,
        t0: time.t0,
        dt,
        x_initial: x0.as_slice().to_vec(),
        x_true,
        dy: dys,
    })
}

fn initial_truth_state(side: &QuantumSide) -> TruthState {
    let (values, vectors) = hermitian_eigen(&side.rho0);
    let d = values.len();
    let top = values[d - 1];
    let rest: f64 = values.iter().take(d - 1).map(|v| v.abs()).sum();
    if side.model.dissipators.is_empty() && rest < 1e-12 * top.max(1.0) {
        let psi = vectors.column(d - 1).into_owned();
        TruthState::Pure(psi)
    } else {
        TruthState::Mixed(side.rho0.clone())
    }
}

/// Lower Cholesky factor of a PSD matrix (zero rows and columns allowed).
fn cholesky_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = m.clone().cholesky() {
        return c.l();
    }
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// True iff regenerating from the record's seed reproduces it bit for bit.
pub fn replay_check(record: &TrajectoryRecord, scenario: &Scenario) -> Result<bool> {
    if record.scenario_id != scenario.id {
        return Err(Error::InvalidArgument(format!(
            "record belongs to scenario {}, not {}",
            record.scenario_id, scenario.id
        )));
    }
    let fresh = simulate_truth(scenario, record.seed)?;
    let same_bits = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(u, v)| u.len() == v.len() && u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits()))
    };
    Ok(same_bits(&fresh.x_true, &record.x_true)
        && same_bits(&fresh.dy, &record.dy)
        && fresh.x_initial.iter().zip(&record.x_initial).all(|(a, b)| a.to_bits() == b.to_bits()))
}

/// Sidecar metadata written next to a record CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMetadata {
    pub format: String,
    pub tool_version: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
    pub x_initial: Vec<f64>,
}

pub const RECORD_FORMAT: &str = "qsmooth-record/v1";

/// Sidecar path for a record CSV (`record.csv` -> `record.meta.json`).
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes `record` as CSV plus its metadata sidecar.
pub fn write_record(record: &TrajectoryRecord, csv_path: &Path) -> Result<()> {
    let n = record.x_initial.len();
    let m = record.dy.first().map(|d| d.len()).unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(out, "# {RECORD_FORMAT} scenario={}", record.scenario_id)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_true_{i}")));
    header.extend((0..m).map(|i| format!("dy_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for i in 0..record.steps() {
        let mut row = vec![fmt_f64(record.time(i + 1))];
        row.extend(record.x_true[i].iter().map(|v| fmt_f64(*v)));
        row.extend(record.dy[i].iter().map(|v| fmt_f64(*v)));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    let meta = RecordMetadata {
        format: RECORD_FORMAT.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        scenario_hash: record.scenario_id.clone(),
        seed: record.seed,
        t0: record.t0,
        dt: record.dt,
        steps: record.steps(),
        x_initial: record.x_initial.clone(),
    };
    std::fs::write(metadata_path(csv_path), serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n")?;
    Ok(())
}

/// Reads a record written by [`write_record`].
pub fn read_record(csv_path: &Path) -> Result<TrajectoryRecord> {
    let meta_path = metadata_path(csv_path);
    let fmt_err = |path: &Path, message: String| Error::Format { path: path.display().to_string(), message };
    let meta: RecordMetadata = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| fmt_err(&meta_path, e.to_string()))?;
    if meta.format != RECORD_FORMAT {
        return Err(fmt_err(&meta_path, format!("unsupported format {}", meta.format)));
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(csv_path).map_err(|e| fmt_err(csv_path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| fmt_err(csv_path, e.to_string()))?.clone();
    let n = headers.iter().filter(|h| h.starts_with("x_true_")).count();
    let m = headers.iter().filter(|h| h.starts_with("dy_")).count();
    if headers.len() != 1 + n + m || n != meta.x_initial.len() {
        return Err(fmt_err(csv_path, "unexpected column layout".into()));
    }
    let mut x_true = Vec::with_capacity(meta.steps);
    let mut dy = Vec::with_capacity(meta.steps);
    for row in reader.records() {
        let row = row.map_err(|e| fmt_err(csv_path, e.to_string()))?;
        let vals: Vec<f64> = row
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fmt_err(csv_path, e.to_string()))?;
        x_true.push(vals[1..1 + n].to_vec());
        dy.push(vals[1 + n..].to_vec());
    }
    if dy.len() != meta.steps {
        return Err(fmt_err(csv_path, format!("expected {} rows, found {}", meta.steps, dy.len())));
    }
    Ok(TrajectoryRecord {
        scenario_id: meta.scenario_hash,
        seed: meta.seed,
        t0: meta.t0,
        dt: meta.dt,
        x_initial: meta.x_initial,
        x_true,
        dy,
    })
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
