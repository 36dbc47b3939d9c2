//! Estimator dispatch shared by the `estimate` and `ensemble` commands.

use std::fmt;
use std::str::FromStr;

use crate::engine::HybridEngine;
use crate::error::{Error, Result};
use crate::io::{EstimateRow, EstimateTable};
use crate::kalman::{derive_lg_model, kalman_log_likelihood, kalman_smoother, LinearGaussianModel};
use crate::scenario::Scenario;
use crate::forward::run_filter;
use crate::smoother::{retrodict, smooth_series, SmoothingDensity, SmoothingRun};
use crate::truth::TrajectoryRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Filter,
    Smooth,
    Retrodict,
    Kalman,
    KalmanSmooth,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Filter, Method::Smooth, Method::Retrodict, Method::Kalman, Method::KalmanSmooth];

    pub fn name(self) -> &'static str {
        match self {
            Method::Filter => "filter",
            Method::Smooth => "smooth",
            Method::Retrodict => "retrodict",
            Method::Kalman => "kalman",
            Method::KalmanSmooth => "kalman-smooth",
        }
    }

    pub fn needs_grid(self) -> bool {
        matches!(self, Method::Filter | Method::Smooth | Method::Retrodict)
    }

    pub fn needs_lg(self) -> bool {
        matches!(self, Method::Kalman | Method::KalmanSmooth)
    }

    /// Parses a comma-separated list, dropping duplicates and keeping a fixed order.
    pub fn parse_list(list: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::InvalidArgument("no methods given".into()));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}` (expected one of filter, smooth, retrodict, kalman, kalman-smooth)")))
    }
}

/// Engine and (when derivable) Gaussian model for a scenario, built once and
/// reused across records.
pub struct Estimators {
    pub scenario_hash: String,
    pub engine: Option<HybridEngine>,
    pub lg: Option<LinearGaussianModel>,
    pub stride: usize,
}

impl Estimators {
    pub fn new(scenario: &Scenario, methods: &[Method], stride: Option<usize>) -> Result<Self> {
        let engine = if methods.iter().any(|m| m.needs_grid()) { Some(HybridEngine::new(scenario)?) } else { None };
        let lg = if methods.iter().any(|m| m.needs_lg()) { Some(derive_lg_model(scenario)?) } else { None };
        let stride = stride.unwrap_or_else(|| scenario.effective_stride());
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(Estimators { scenario_hash: scenario.id.clone(), engine, lg, stride })
    }

    /// One table per method. Rows are at `t_1 ..= t_N` (every step for the
    /// filters, every `stride` steps for the grid smoothers), so row times line
    /// up with the record's `x_true` rows.
    pub fn run(&self, record: &TrajectoryRecord, methods: &[Method]) -> Result<Vec<(Method, EstimateTable, Option<Vec<SmoothingDensity>>)>> {
        let dy = &record.dy;
        let mut out = Vec::new();
        let mut grid_run = None;
        let mut kalman = None;
        for &m in methods {
            let (rows, densities) = match m {
                Method::Filter | Method::Smooth => {
                    let engine = self.engine.as_ref().expect("engine built for grid methods");
                    if grid_run.is_none() {
                        // the backward pass is only paid for when smoothing was asked for
                        grid_run = Some(if methods.contains(&Method::Smooth) {
                            smooth_series(engine, dy, self.stride)?
                        } else {
                            SmoothingRun { filtered: run_filter(engine, dy, None)?.estimates, smoothed: vec![] }
                        });
                    }
                    let run = grid_run.as_ref().expect("just computed");
                    if m == Method::Filter {
                        (run.filtered.iter().skip(1).map(EstimateRow::from_filter).collect(), None)
                    } else {
                        let kept: Vec<SmoothingDensity> = run.smoothed.iter().filter(|s| s.step > 0).cloned().collect();
                        (kept.iter().map(EstimateRow::from_smoothing).collect(), Some(kept))
                    }
                }
                Method::Retrodict => {
                    let engine = self.engine.as_ref().expect("engine built for grid methods");
                    let kept: Vec<SmoothingDensity> =
                        retrodict(engine, dy, self.stride)?.into_iter().filter(|s| s.step > 0).collect();
                    (kept.iter().map(EstimateRow::from_smoothing).collect(), Some(kept))
                }
                Method::Kalman | Method::KalmanSmooth => {
                    let lg = self.lg.as_ref().expect("model derived for Kalman methods");
                    if kalman.is_none() {
                        let ks = kalman_smoother(lg, record.t0, record.dt, dy)?;
                        let ll = kalman_log_likelihood(lg, &ks.filtered, record.dt, dy)?;
                        kalman = Some((ks, ll));
                    }
                    let (ks, ll) = kalman.as_ref().expect("just computed");
                    let total = *ll.last().expect("at least the prior");
                    let rows: Vec<EstimateRow> = if m == Method::Kalman {
                        ks.filtered.iter().zip(ll).skip(1).map(|(g, l)| EstimateRow::from_gaussian(g, *l)).collect()
                    } else {
                        ks.smoothed.iter().skip(1).map(|g| EstimateRow::from_gaussian(g, total)).collect()
                    };
                    (rows, None)
                }
            };
            let table = EstimateTable { scenario_hash: self.scenario_hash.clone(), method: m.name().into(), rows };
            out.push((m, table, densities));
        }
        Ok(out)
    }
}
