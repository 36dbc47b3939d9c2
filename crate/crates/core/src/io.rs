//! Estimate tables, smoothed-density tables and field snapshots.
//!
//! Every file starts with a `# <format> scenario=<hash> ...` line. Floats use
//! the shortest round-trip representation, so identical runs give identical bytes.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::backward::EffectField;
use crate::classical::ClassicalGrid;
use crate::engine::BlockStack;
use crate::error::{Error, Result};
use crate::forward::{FilterEstimate, HybridDensityField};
use crate::kalman::GaussianEstimate;
use crate::linalg::C64;
use crate::smoother::SmoothingDensity;
use crate::truth::fmt_f64;

pub const ESTIMATE_FORMAT: &str = "qsmooth-estimates/v1";
pub const DENSITY_FORMAT: &str = "qsmooth-density/v1";
pub const SNAPSHOT_FORMAT: &str = "qsmooth-snapshot/v1";

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), message: message.into() }
}

/// One time of an estimator's output: moments of the classical state.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Row-major `n x n`.
    pub cov: Vec<f64>,
    pub log_likelihood: f64,
}

impl EstimateRow {
    pub fn new(t: f64, mean: &DVector<f64>, cov: &DMatrix<f64>, log_likelihood: f64) -> Self {
        let n = mean.len();
        let cov = (0..n * n).map(|i| cov[(i / n, i % n)]).collect();
        EstimateRow { t, mean: mean.iter().copied().collect(), cov, log_likelihood }
    }

    pub fn from_filter(e: &FilterEstimate) -> Self {
        EstimateRow::new(e.t, &e.x_mean, &e.x_cov, e.log_likelihood)
    }

    pub fn from_smoothing(s: &SmoothingDensity) -> Self {
        EstimateRow::new(s.t, &s.x_mean, &s.x_cov, s.log_evidence)
    }

    /// Classical block of a Gaussian reference estimate.
    pub fn from_gaussian(g: &GaussianEstimate, log_likelihood: f64) -> Self {
        let (m, p) = g.classical();
        EstimateRow::new(g.t, &m, &p, log_likelihood)
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov[i * self.mean.len() + i]
    }
}

/// Output of one estimator over a record.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateTable {
    pub scenario_hash: String,
    pub method: String,
    pub rows: Vec<EstimateRow>,
}

fn parse_preamble(path: &Path, line: &str, format: &str) -> Result<Vec<(String, String)>> {
    let rest = line
        .strip_prefix("# ")
        .and_then(|l| l.strip_prefix(format))
        .ok_or_else(|| fmt_err(path, format!("expected a `# {format}` first line")))?;
    Ok(rest
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect())
}

fn field<'a>(path: &Path, fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| fmt_err(path, format!("preamble lacks `{key}`")))
}

fn read_first_line(path: &Path) -> Result<String> {
    let mut line = String::new();
    std::io::BufReader::new(std::fs::File::open(path)?).read_line(&mut line)?;
    Ok(line.trim_end().to_string())
}

fn parse_row(path: &Path, row: &csv::StringRecord, skip: usize) -> Result<Vec<f64>> {
    row.iter()
        .skip(skip)
        .map(|s| s.trim().parse::<f64>().map_err(|e| fmt_err(path, format!("{e} in `{s}`"))))
        .collect()
}

/// Writes `method,t,x_mean_i..,x_cov_i_j..,log_likelihood`.
pub fn write_estimates(path: &Path, table: &EstimateTable) -> Result<()> {
    let n = table.rows.first().map_or(0, |r| r.mean.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# {ESTIMATE_FORMAT} scenario={} method={}", table.scenario_hash, table.method)?;
    let mut header = vec!["method".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("x_mean_{i}")));
    header.extend((0..n * n).map(|i| format!("x_cov_{}_{}", i / n, i % n)));
    header.push("log_likelihood".into());
    writeln!(out, "{}", header.join(","))?;
    for r in &table.rows {
        let mut cells = vec![table.method.clone(), fmt_f64(r.t)];
        cells.extend(r.mean.iter().chain(&r.cov).map(|v| fmt_f64(*v)));
        cells.push(fmt_f64(r.log_likelihood));
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_estimates(path: &Path) -> Result<EstimateTable> {
    let fields = parse_preamble(path, &read_first_line(path)?, ESTIMATE_FORMAT)?;
    let scenario_hash = field(path, &fields, "scenario")?.to_string();
    let method = field(path, &fields, "method")?.to_string();
    let mut reader =
        csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| fmt_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| fmt_err(path, e.to_string()))?.clone();
    let n = headers.iter().filter(|h| h.starts_with("x_mean_")).count();
    if headers.len() != 3 + n + n * n || &headers[0] != "method" || &headers[1] != "t" {
        return Err(fmt_err(path, "unexpected column layout"));
    }
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| fmt_err(path, e.to_string()))?;
        if row[0] != *method {
            return Err(fmt_err(path, format!("row tagged `{}` in a `{method}` table", &row[0])));
        }
        let v = parse_row(path, &row, 1)?;
        rows.push(EstimateRow {
            t: v[0],
            mean: v[1..1 + n].to_vec(),
            cov: v[1 + n..1 + n + n * n].to_vec(),
            log_likelihood: v[1 + n + n * n],
        });
    }
    Ok(EstimateTable { scenario_hash, method, rows })
}

/// Full smoothed densities `h(x_k)` per time: `t,h_0..h_{K-1}`.
pub fn write_densities(path: &Path, scenario_hash: &str, method: &str, grid: &ClassicalGrid, rows: &[SmoothingDensity]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# {DENSITY_FORMAT} scenario={scenario_hash} method={method} points={}", grid.len())?;
    let coords: Vec<String> = grid.points().iter().map(|p| p.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")).collect();
    writeln!(out, "# x={}", coords.join(","))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..grid.len()).map(|k| format!("h_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for s in rows {
        let mut cells = vec![fmt_f64(s.t)];
        cells.extend(s.h.iter().map(|v| fmt_f64(*v)));
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `(t, h)` rows back from [`write_densities`].
pub fn read_densities(path: &Path) -> Result<Vec<(f64, Vec<f64>)>> {
    parse_preamble(path, &read_first_line(path)?, DENSITY_FORMAT)?;
    let mut reader =
        csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| fmt_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let v = parse_row(path, &row.map_err(|e| fmt_err(path, e.to_string()))?, 0)?;
        out.push((v[0], v[1..].to_vec()));
    }
    Ok(out)
}

/// Pass that produced a snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn marker(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Blocks plus ledger of a forward or effect field, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub scenario_hash: String,
    pub direction: Direction,
    pub step: usize,
    pub t: f64,
    pub log_weight: f64,
    pub stack: BlockStack,
}

impl Snapshot {
    pub fn forward(scenario_hash: &str, f: &HybridDensityField) -> Self {
        Snapshot {
            scenario_hash: scenario_hash.into(),
            direction: Direction::Forward,
            step: f.step,
            t: f.t,
            log_weight: f.log_weight,
            stack: f.stack.clone(),
        }
    }

    pub fn backward(scenario_hash: &str, g: &EffectField) -> Self {
        Snapshot {
            scenario_hash: scenario_hash.into(),
            direction: Direction::Backward,
            step: g.step,
            t: g.t,
            log_weight: g.log_weight,
            stack: g.stack.clone(),
        }
    }

    /// `snapshot_<step>.<fwd|bwd>.txt` inside `dir`.
    pub fn file_name(&self, dir: &Path) -> PathBuf {
        dir.join(format!("snapshot_{:08}.{}.txt", self.step, self.direction.marker()))
    }
}

/// Decimal text: a preamble, `t`, `step`, `log_weight`, `points`, `dim`, then
/// one line per block holding the column-major entries as `re im` pairs.
pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# {SNAPSHOT_FORMAT} scenario={} direction={}", snap.scenario_hash, snap.direction.marker())?;
    writeln!(out, "t {}", fmt_f64(snap.t))?;
    writeln!(out, "step {}", snap.step)?;
    writeln!(out, "log_weight {}", fmt_f64(snap.log_weight))?;
    writeln!(out, "points {}", snap.stack.len())?;
    writeln!(out, "dim {}", snap.stack.dim)?;
    for k in 0..snap.stack.len() {
        let cells: Vec<String> = snap.stack.block(k).iter().map(|c| format!("{} {}", fmt_f64(c.re), fmt_f64(c.im))).collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let fields = parse_preamble(path, lines.next().unwrap_or(""), SNAPSHOT_FORMAT)?;
    let direction = match field(path, &fields, "direction")? {
        "fwd" => Direction::Forward,
        "bwd" => Direction::Backward,
        other => return Err(fmt_err(path, format!("unknown direction `{other}`"))),
    };
    let mut keyed = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| fmt_err(path, format!("missing `{key}`")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| fmt_err(path, format!("expected `{key}`, found `{line}`")))
    };
    let num = |s: String| -> Result<f64> { s.parse().map_err(|_| fmt_err(path, format!("bad number `{s}`"))) };
    let int = |s: String| -> Result<usize> { s.parse().map_err(|_| fmt_err(path, format!("bad integer `{s}`"))) };
    let t = num(keyed("t")?)?;
    let step = int(keyed("step")?)?;
    let log_weight = num(keyed("log_weight")?)?;
    let points = int(keyed("points")?)?;
    let dim = int(keyed("dim")?)?;
    let mut stack = BlockStack::zeros(points, dim);
    for k in 0..points {
        let line = lines.next().ok_or_else(|| fmt_err(path, format!("missing block {k}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| fmt_err(path, format!("bad number `{s}` in block {k}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 2 * dim * dim {
            return Err(fmt_err(path, format!("block {k} has {} numbers, expected {}", vals.len(), 2 * dim * dim)));
        }
        for (slot, pair) in stack.block_mut(k).iter_mut().zip(vals.chunks(2)) {
            *slot = C64::new(pair[0], pair[1]);
        }
    }
    Ok(Snapshot { scenario_hash: field(path, &fields, "scenario")?.to_string(), direction, step, t, log_weight, stack })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimates_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let table = EstimateTable {
            scenario_hash: "abc".into(),
            method: "filter".into(),
            rows: vec![
                EstimateRow { t: 0.1, mean: vec![1.0 / 3.0], cov: vec![2e-17], log_likelihood: -0.5 },
                EstimateRow { t: 0.2, mean: vec![-7.25], cov: vec![0.1 + 0.2], log_likelihood: 1e300 },
            ],
        };
        write_estimates(&path, &table).unwrap();
        assert_eq!(read_estimates(&path).unwrap(), table);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# qsmooth-estimates/v1 scenario=abc method=filter\nmethod,t,x_mean_0,x_cov_0_0,log_likelihood\n"));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut stack = BlockStack::zeros(3, 2);
        for k in 0..3 {
            for (i, v) in stack.block_mut(k).iter_mut().enumerate() {
                *v = C64::new(k as f64 + 0.1 * i as f64, -(i as f64) / 7.0);
            }
        }
        let snap = Snapshot {
            scenario_hash: "h".into(),
            direction: Direction::Backward,
            step: 42,
            t: 0.042,
            log_weight: -3.5,
            stack,
        };
        let path = snap.file_name(dir.path());
        assert!(path.ends_with("snapshot_00000042.bwd.txt"));
        write_snapshot(&path, &snap).unwrap();
        assert_eq!(read_snapshot(&path).unwrap(), snap);
    }

    #[test]
    fn wrong_format_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "t,x\n1,2\n").unwrap();
        assert!(matches!(read_estimates(&path), Err(Error::Format { .. })));
    }
}
