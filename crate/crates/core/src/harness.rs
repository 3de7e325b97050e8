//! Experiment driver behind the command line: configuration, scenario runs
//! and artifact files.
//!
//! Config files are flat `key = value` text. Lists are comma separated,
//! `#` starts a comment. Keys match the long command-line flags:
//!
//! ```text
//! scenario = linear1d
//! k = 16
//! k_list = 4, 8, 16, 32
//! eps = 1e-3
//! grid = 4096
//! seed = 24301
//! ```
//!
//! Every artifact starts with a header (version, config hash, creation time);
//! the body after it depends only on the configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bolza::{switching_times, BolzaError, BolzaProblem, OracleMode, RelaxedOptions};
use crate::convex::ConvexBody;
use crate::purify::{
    convergence_study, purify, reference_trajectory, v_deficit, v_identity_integral, write_convergence_csv,
    CellFallback, PurifyError, PurifyOptions,
};
use crate::systems::{catalog, catalog_names, verify_concavity_conditions, CatalogEntry, SelectionOptions};
use crate::variance::{h, HValue, VarianceError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "BANGBANG_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Purify(#[from] PurifyError),
    #[error(transparent)]
    Bolza(#[from] BolzaError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::UnknownScenario(_) => "unknown_scenario",
            HarnessError::Config(_) => "config",
            HarnessError::Output { .. } => "output",
            HarnessError::Purify(_) => "purification",
            HarnessError::Bolza(_) => "bolza",
            HarnessError::Variance(_) => "variance",
        }
    }

    /// Machine-readable form printed by the binary.
    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    HEval,
    Purify,
    Convergence,
    Bolza,
    Counterexample,
    VerifyConcavity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::HEval => "h-eval",
            Command::Purify => "purify",
            Command::Convergence => "convergence",
            Command::Bolza => "bolza",
            Command::Counterexample => "counterexample",
            Command::VerifyConcavity => "verify-concavity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub k: usize,
    pub k_list: Vec<usize>,
    pub eps: Vec<f64>,
    /// Reference grid steps.
    pub grid: usize,
    pub seed: u64,
    /// Body for `h-eval`: square, segment, triangle, ball.
    pub body: String,
    pub y: Vec<f64>,
    /// Sample count for `verify-concavity`.
    pub samples: usize,
    pub tol: f64,
    pub cells_per_interval: usize,
    pub max_level: u32,
    /// Fixed chattering level for `counterexample`.
    pub level: u32,
    pub n_time: usize,
    pub n_control: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "linear1d".into(),
            k: 16,
            k_list: vec![4, 8, 16, 32],
            eps: vec![1e-3],
            grid: 4096,
            seed: SelectionOptions::default().seed,
            body: "square".into(),
            y: vec![0.5, 0.5],
            samples: 200,
            tol: PurifyOptions::default().tol,
            cells_per_interval: PurifyOptions::default().cells_per_interval,
            max_level: PurifyOptions::default().max_level,
            level: 2,
            n_time: 32,
            n_control: 9,
            out: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| HarnessError::Config(format!("{key}: cannot parse '{s}'"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse '{}'", v.trim())))
}

impl ExperimentConfig {
    /// Sets one key; used for config files and command-line overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "scenario" => self.scenario = value.trim().into(),
            "k" => self.k = parse_one(&key, value)?,
            "k_list" => self.k_list = parse_list(&key, value)?,
            "eps" | "eps_list" => self.eps = parse_list(&key, value)?,
            "grid" => self.grid = parse_one(&key, value)?,
            "seed" => self.seed = parse_one(&key, value)?,
            "body" => self.body = value.trim().into(),
            "y" => self.y = parse_list(&key, value)?,
            "samples" => self.samples = parse_one(&key, value)?,
            "tol" => self.tol = parse_one(&key, value)?,
            "cells_per_interval" => self.cells_per_interval = parse_one(&key, value)?,
            "max_level" => self.max_level = parse_one(&key, value)?,
            "level" => self.level = parse_one(&key, value)?,
            "n_time" => self.n_time = parse_one(&key, value)?,
            "n_control" => self.n_control = parse_one(&key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            _ => return Err(HarnessError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self, command: Command) -> Result<(), HarnessError> {
        let uses_scenario = matches!(command, Command::Purify | Command::Convergence | Command::VerifyConcavity);
        if uses_scenario && catalog(&self.scenario).is_none() {
            return Err(HarnessError::UnknownScenario(self.scenario.clone()));
        }
        if self.k_list.is_empty() || self.k_list.windows(2).any(|w| w[1] <= w[0]) || self.k_list[0] == 0 {
            return Err(HarnessError::Config("k_list must be non-empty and strictly increasing".into()));
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(HarnessError::Config("eps values must be positive".into()));
        }
        if self.k == 0 || self.grid < 2 || !(self.tol > 0.0) {
            return Err(HarnessError::Config("k, grid and tol must be positive".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self, command: Command) -> String {
        let mut canon = self.clone();
        canon.out = None;
        let text = serde_json::to_string(&(command, &canon)).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn purify_options(&self) -> PurifyOptions {
        PurifyOptions {
            tol: self.tol,
            cells_per_interval: self.cells_per_interval,
            max_level: self.max_level,
            selection: SelectionOptions {
                seed: self.seed,
                ..SelectionOptions::default()
            },
            ..PurifyOptions::default()
        }
    }
}

/// One output file: deterministic body plus a header.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub body: String,
    /// Extra header fields (run times and similar non-deterministic data).
    pub header_extra: Value,
}

impl Artifact {
    fn header(&self, command: Command, hash: &str) -> Value {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        json!({
            "tool": "bangbang",
            "version": VERSION,
            "command": command.name(),
            "config_hash": hash,
            "created_unix": created,
            "extra": self.header_extra,
        })
    }

    /// File contents: a `#` header line for CSV, a `header` object for JSON.
    pub fn render(&self, command: Command, hash: &str) -> String {
        let header = self.header(command, hash);
        if self.name.ends_with(".csv") {
            format!("# {header}\n{}", self.body)
        } else {
            format!("{{\"header\":{header},\n\"body\":{}}}\n", self.body)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub command: Command,
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
    /// Short summary printed on stdout.
    pub summary: Value,
}

fn json_body(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn entry(name: &str) -> Result<CatalogEntry, HarnessError> {
    catalog(name).ok_or_else(|| HarnessError::UnknownScenario(name.into()))
}

fn h_body(name: &str, y: &[f64]) -> Result<ConvexBody, HarnessError> {
    let n = y.len();
    let bad = |m: &str| HarnessError::Config(m.into());
    Ok(match name {
        "square" if n == 2 => ConvexBody::unit_square(),
        "segment" if n == 1 => ConvexBody::segment(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0))
            .map_err(|e| bad(&e.to_string()))?,
        "triangle" if n == 2 => ConvexBody::polytope(vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ])
        .map_err(|e| bad(&e.to_string()))?,
        "ball" if n >= 1 => ConvexBody::ball(DVector::zeros(n), 1.0).map_err(|e| bad(&e.to_string()))?,
        "square" | "segment" | "triangle" | "ball" => {
            return Err(bad(&format!("body '{name}' does not accept a point of dimension {n}")))
        }
        _ => return Err(bad(&format!("unknown body '{name}' (square, segment, triangle, ball)"))),
    })
}

/// Runs one command; artifacts are returned, not written.
pub fn run_scenario(command: Command, cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate(command)?;
    let hash = cfg.hash(command);
    let mut artifacts = Vec::new();
    let summary = match command {
        Command::HEval => {
            let body = h_body(&cfg.body, &cfg.y)?;
            let y = DVector::from_vec(cfg.y.clone());
            let value = match h(&y, &body, 1e-9)? {
                HValue::Finite(v) => json!(v),
                HValue::MinusInfinity => json!("-inf"),
            };
            let out = json!({ "body": cfg.body, "y": cfg.y, "h": value });
            artifacts.push(Artifact {
                name: "h-eval.json".into(),
                body: json_body(&out),
                header_extra: Value::Null,
            });
            out
        }
        Command::Purify => {
            let e = entry(&cfg.scenario)?;
            let reference = reference_trajectory(&e, cfg.grid)?;
            let eps = cfg.eps[0];
            let p = purify(&e.system, &reference, cfg.k, eps, &cfg.purify_options())?;
            let mut csv = Vec::new();
            p.trajectory.write_csv(&mut csv).expect("in-memory write");
            artifacts.push(Artifact {
                name: format!("purify-{}.json", cfg.scenario),
                body: json_body(&p.report),
                header_extra: Value::Null,
            });
            artifacts.push(Artifact {
                name: format!("purify-{}-trajectory.csv", cfg.scenario),
                body: String::from_utf8(csv).expect("utf8"),
                header_extra: Value::Null,
            });
            let r = &p.report;
            json!({
                "scenario": cfg.scenario, "k": r.k, "eps": r.eps,
                "l_before": r.l_before, "l_after": r.l_after,
                "c0_distance": r.c0_distance, "c0_bound": r.c0_bound,
                "max_endpoint_error": r.max_endpoint_error, "flags": r.flags(),
            })
        }
        Command::Convergence => {
            let e = entry(&cfg.scenario)?;
            let reference = reference_trajectory(&e, cfg.grid)?;
            let rows = convergence_study(&e.system, &reference, &cfg.k_list, &cfg.eps, &cfg.purify_options())?;
            let mut csv = Vec::new();
            write_convergence_csv(&rows, &mut csv).expect("in-memory write");
            let runtimes: Vec<f64> = rows.iter().map(|r| r.runtime_ms).collect();
            let table: Vec<Value> = rows
                .iter()
                .map(|r| {
                    json!({
                        "k": r.k, "eps": r.eps, "l_before": r.l_before, "l_after": r.l_after,
                        "c0": r.c0, "c0_bound": r.c0_bound, "max_ep_err": r.max_ep_err, "flags": r.flags,
                    })
                })
                .collect();
            artifacts.push(Artifact {
                name: format!("convergence-{}.csv", cfg.scenario),
                body: String::from_utf8(csv).expect("utf8"),
                header_extra: json!({ "runtime_ms": runtimes }),
            });
            artifacts.push(Artifact {
                name: format!("convergence-{}.json", cfg.scenario),
                body: json_body(&table),
                header_extra: json!({ "runtime_ms": runtimes }),
            });
            json!({ "scenario": cfg.scenario, "rows": table })
        }
        Command::Counterexample => {
            let e = entry("counterexample-6")?;
            let reference = reference_trajectory(&e, cfg.grid)?;
            let mut opts = cfg.purify_options();
            opts.fallback = CellFallback::ExtremeFan;
            opts.min_level = cfg.level;
            opts.max_level = cfg.level;
            let mut csv = String::from("k,v_deficit,identity,abs_diff,max_ep_err,extremal_fraction,flags\n");
            let mut rows = Vec::new();
            for &k in &cfg.k_list {
                let p = purify(&e.system, &reference, k, cfg.eps[0], &opts)?;
                let d = v_deficit(&e.system, &p.trajectory)?;
                let steps = p.trajectory.len() - 1;
                let id = v_identity_integral(&p.control, &e.x0, e.interval, steps)?;
                let r = &p.report;
                let _ = writeln!(
                    csv,
                    "{k},{d:.12e},{id:.12e},{:.3e},{:.12e},{:.6},{}",
                    (d - id).abs(),
                    r.max_endpoint_error,
                    r.extremal_fraction,
                    r.flags()
                );
                rows.push(json!({
                    "k": k, "v_deficit": d, "identity": id, "max_ep_err": r.max_endpoint_error,
                    "extremal_fraction": r.extremal_fraction, "flags": r.flags(),
                }));
            }
            artifacts.push(Artifact {
                name: "counterexample.csv".into(),
                body: csv,
                header_extra: Value::Null,
            });
            json!({ "rows": rows })
        }
        Command::Bolza => {
            let problem = BolzaProblem::concave_1d();
            let relaxed = problem.solve_relaxed(cfg.n_time, cfg.n_control, &RelaxedOptions::default())?;
            let grid: Vec<DVector<f64>> = [-1.0, 0.0, 1.0].iter().map(|v| DVector::from_element(1, *v)).collect();
            let oracle = problem.brute_force_oracle(8, &grid, OracleMode::Exhaustive { limit: 1 << 24 })?;
            let eps = cfg.eps[0];
            let sol = problem.purify_and_extract(cfg.n_control, &relaxed, cfg.k, eps, &cfg.purify_options())?;
            let out = json!({
                "problem": "concave-1d",
                "relaxed_cost": relaxed.cost,
                "oracle_cost_n8": oracle.cost,
                "cost": sol.cost,
                "gap": sol.gap,
                "m": sol.m,
                "bang_fraction": sol.bang_fraction,
                "below_m_fraction": sol.below_m_fraction,
                "v_selected": sol.v_selected,
                "flagged_cells": sol.flagged_cells,
                "switching_times": switching_times(&sol.control),
                "purification": sol.report,
            });
            artifacts.push(Artifact {
                name: "bolza.json".into(),
                body: json_body(&out),
                header_extra: Value::Null,
            });
            json!({ "relaxed_cost": relaxed.cost, "cost": sol.cost, "gap": sol.gap, "bang_fraction": sol.bang_fraction })
        }
        Command::VerifyConcavity => {
            let e = entry(&cfg.scenario)?;
            let opts = SelectionOptions {
                seed: cfg.seed,
                ..SelectionOptions::default()
            };
            let report = verify_concavity_conditions(&e.system, e.interval, &e.check_box, cfg.samples, &cfg.eps, &opts);
            let out = json!({
                "scenario": cfg.scenario,
                "c1_holds": report.c1_holds(),
                "c2_holds": report.c2_holds(),
                "report": report,
            });
            artifacts.push(Artifact {
                name: format!("verify-concavity-{}.json", cfg.scenario),
                body: json_body(&out),
                header_extra: Value::Null,
            });
            json!({ "scenario": cfg.scenario, "c1_holds": report.c1_holds(), "c2_holds": report.c2_holds(),
                    "c1_fail": report.c1_fail, "c2_fail": report.c2_fail })
        }
    };
    Ok(RunOutput {
        command,
        config_hash: hash,
        artifacts,
        summary,
    })
}

/// Output directory: the config value, else the environment variable, else `results`.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Writes every artifact under `dir`, returning the paths.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Output {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for a in &out.artifacts {
        let path = dir.join(&a.name);
        fs::write(&path, a.render(out.command, &out.config_hash)).map_err(|source| HarnessError::Output {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Runs and writes; returns the summary with the written paths and elapsed time.
pub fn run_and_write(command: Command, cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let clock = Instant::now();
    let out = run_scenario(command, cfg)?;
    let paths = write_artifacts(&out, &output_dir(cfg))?;
    Ok(json!({
        "command": command.name(),
        "config_hash": out.config_hash,
        "files": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "elapsed_ms": clock.elapsed().as_secs_f64() * 1e3,
        "summary": out.summary,
    }))
}

/// Names accepted by `--scenario`.
pub fn scenario_names() -> &'static [&'static str] {
    catalog_names()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\nscenario = radial-square\nk-list = 8, 32\neps = 1e-4 # inline\nseed=7\n")
            .unwrap();
        assert_eq!(c.scenario, "radial-square");
        assert_eq!(c.k_list, vec![8, 32]);
        assert_eq!(c.eps, vec![1e-4]);
        assert_eq!(c.seed, 7);
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.set("colour", "blue").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.k_list = vec![8, 4];
        assert!(matches!(c.validate(Command::Convergence), Err(HarnessError::Config(_))));
        let mut c = ExperimentConfig::default();
        c.scenario = "nope".into();
        assert!(matches!(c.validate(Command::Purify), Err(HarnessError::UnknownScenario(_))));
        assert!(c.validate(Command::HEval).is_ok());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = ExperimentConfig::default();
        let h1 = a.hash(Command::Purify);
        a.out = Some("/tmp/x".into());
        assert_eq!(h1, a.hash(Command::Purify));
        assert_ne!(h1, a.hash(Command::Convergence));
        a.k = 17;
        assert_ne!(h1, a.hash(Command::Purify));
    }

    #[test]
    fn h_eval_square_center() {
        let out = run_scenario(Command::HEval, &ExperimentConfig::default()).unwrap();
        let v = out.summary["h"].as_f64().unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-8, "{v}");
        let mut c = ExperimentConfig::default();
        c.body = "ball".into();
        c.y = vec![0.6, 0.0];
        let v = run_scenario(Command::HEval, &c).unwrap().summary["h"].as_f64().unwrap();
        assert!((v - 0.8).abs() < 1e-9);
    }
}
