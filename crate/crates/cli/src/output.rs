//! Result rows, summaries and the files written for every run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CliError, ExperimentConfig};

/// One deterministic measurement. `epsilon` and `rho` are set only where they vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub mesh_n: usize,
    pub metric: String,
    pub value: f64,
    pub replicate: usize,
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
}

impl ResultRow {
    pub fn new(method: impl Into<String>, mesh_n: usize, metric: impl Into<String>, value: f64, replicate: usize) -> Self {
        Self {
            method: method.into(),
            mesh_n,
            metric: metric.into(),
            value,
            replicate,
            epsilon: None,
            rho: None,
        }
    }

    pub fn with_epsilon(mut self, e: f64) -> Self {
        self.epsilon = Some(e);
        self
    }

    pub fn with_rho(mut self, r: f64) -> Self {
        self.rho = Some(r);
        self
    }
}

/// Wall-clock seconds spent in one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub mesh_n: usize,
    pub replicate: usize,
    pub phase: String,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub purpose: String,
    pub replicate: usize,
    pub seed: u64,
}

/// Everything an experiment produces.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<TimingRow>,
    pub seeds: Vec<SeedRecord>,
    /// Extra files: `(name, contents)`.
    pub artifacts: Vec<(String, String)>,
}

impl RunOutput {
    pub fn extend(&mut self, other: RunOutput) {
        self.rows.extend(other.rows);
        self.timings.extend(other.timings);
        self.seeds.extend(other.seeds);
        self.artifacts.extend(other.artifacts);
    }

    /// Rows matching `method` and `metric`.
    pub fn select<'a>(&'a self, method: &'a str, metric: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method && r.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: String,
    pub mesh_n: usize,
    pub metric: String,
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean and `±2` sample SD per `(method, mesh_n, metric, epsilon, rho)`.
pub fn summarise(rows: &[ResultRow]) -> Vec<SummaryEntry> {
    let mut groups: BTreeMap<(String, usize, String, Option<u64>, Option<u64>), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.method.clone(),
                r.mesh_n,
                r.metric.clone(),
                r.epsilon.map(f64::to_bits),
                r.rho.map(f64::to_bits),
            ))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((method, mesh_n, metric, eps, rho), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryEntry {
                method,
                mesh_n,
                metric,
                epsilon: eps.map(f64::from_bits),
                rho: rho.map(f64::from_bits),
                n,
                mean,
                sd,
                lower: mean - 2.0 * sd,
                upper: mean + 2.0 * sd,
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "mesh_n", "metric", "value", "replicate", "epsilon", "rho"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.mesh_n.to_string(),
            r.metric.clone(),
            format!("{:?}", r.value),
            r.replicate.to_string(),
            opt(r.epsilon),
            opt(r.rho),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn timings_to_csv(rows: &[TimingRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

/// Writes `results.csv`, `timings.csv`, `summary.json`, `config_echo.json`, `seeds.json`
/// and the artifacts into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, out: &RunOutput) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), rows_to_csv(&out.rows)?)?;
    fs::write(dir.join("timings.csv"), timings_to_csv(&out.timings)?)?;
    fs::write(dir.join("summary.json"), json(&summarise(&out.rows)))?;
    fs::write(dir.join("config_echo.json"), json(config))?;
    fs::write(dir.join("seeds.json"), json(&out.seeds))?;
    for (name, contents) in &out.artifacts {
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}
