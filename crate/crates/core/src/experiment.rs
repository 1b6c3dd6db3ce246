//! Experiment configs, named figure presets, and the pipelines that turn
//! them into CSV/JSON artifacts plus a reproducibility manifest.
//!
//! Every ensemble gets its own base seed, derived from the experiment seed
//! and the ensemble's label; run `i` of that ensemble then uses
//! `split_seed(ensemble_seed, i)`. Outputs are written by one thread after
//! aggregation, so the bytes do not depend on the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ensemble::{
    admm_ensemble, max_mean_zscore, max_relative_phi_gap, max_std_gap, residual_scaling, sme_ensemble, std_scaling,
    weak_error_detail, EnsembleStats, WeakError, WeakErrorReport,
};
use crate::error::{Error, Result};
use crate::observable::TestFunction;
use crate::problem::{build_problem, ridge_minimizer, GKind, PresetParams, SigmaMode, StochasticProblem};
use crate::rng::split_seed;
use crate::schedules::{schedule_demo, ScheduleDemoParams};
use crate::sme::{gradient_flow_reference, m_hat, run_sme, MHat, SmeConfig};
use crate::solver::{Solver, SolverConfig};

/// Named presets, one per figure.
pub const PRESETS: &[&str] = &[
    "fig3_1a", "fig3_1b", "fig5_2", "fig5_3", "fig5_4", "fig5_5", "fig5_6", "fig5_7", "fig5_8", "fig5_9", "fig5_10",
    "fig5_11",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// ADMM ensemble statistics.
    Admm,
    /// SME ensemble statistics.
    Sme,
    /// ADMM and SME ensembles side by side with comparison metrics.
    Overlay,
    /// Weak error over the m-grid and the fitted order.
    WeakError,
    /// Residual magnitudes over the m-grid.
    ResidualScan,
    /// `ε^{-1/2}`-rescaled std curves over the m-grid.
    StdScan,
    /// Individual ADMM and SME paths.
    Samples,
    /// Distance of the ADMM ensemble to the minimizer; divergence is reported, not fatal.
    ErrorScan,
    /// Step-size and batch schedules on the 1-D quadratic.
    ScheduleDemo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmeParams {
    /// Overrides the problem's covariance mode when set.
    pub sigma_mode: Option<SigmaMode>,
    pub em_substeps: usize,
}

impl Default for SmeParams {
    fn default() -> Self {
        Self { sigma_mode: None, em_substeps: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleParams {
    pub runs: usize,
    pub base_seed: u64,
    /// Run count of the published figure, used by [`ExperimentConfig::full_scale`].
    pub full_runs: Option<usize>,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self { runs: 10_000, base_seed: 20240422, full_runs: Some(100_000) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for Outputs {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json] }
    }
}

/// A complete experiment description. Every field has a default; the
/// defaults are the toy weak-error sweep.
///
/// The solver's `rho` is ignored: each entry `m` of `m_values` runs at
/// `ρ = 2^m / T`. Empty `alpha_values`, `c_values`, `omega_values` or
/// `g_kinds` fall back to the single value in `solver` / `problem`; the
/// pipeline runs once per combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in reports.
    pub name: String,
    /// Problem preset: `toy`, `ridge`, `lasso` or `custom`.
    pub experiment: String,
    pub pipeline: Pipeline,
    /// Problem parameters; `problem.preset` is replaced by `experiment`.
    pub problem: PresetParams,
    pub solver: SolverConfig,
    pub m_values: Vec<i32>,
    /// m-grid of the published figure, used by [`ExperimentConfig::full_scale`].
    pub full_m_values: Option<Vec<i32>>,
    pub alpha_values: Vec<f64>,
    pub c_values: Vec<f64>,
    pub omega_values: Vec<f64>,
    pub g_kinds: Vec<GKind>,
    pub sme: SmeParams,
    pub ensemble: EnsembleParams,
    pub test_function: TestFunction,
    /// Time window for std comparisons.
    pub std_window: (f64, f64),
    /// Weak error at the final grid time only instead of the max over the grid.
    pub terminal_only: bool,
    /// Paths written by the samples pipeline.
    pub samples: usize,
    pub schedule_demo: ScheduleDemoParams,
    pub outputs: Outputs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "fig3_1b".into(),
            experiment: "toy".into(),
            pipeline: Pipeline::WeakError,
            problem: PresetParams::toy(GKind::Quadratic),
            solver: SolverConfig::default(),
            m_values: (4..=11).collect(),
            full_m_values: None,
            alpha_values: vec![0.5, 1.0, 1.5],
            c_values: Vec::new(),
            omega_values: Vec::new(),
            g_kinds: vec![GKind::Quadratic, GKind::L1],
            sme: SmeParams::default(),
            ensemble: EnsembleParams::default(),
            test_function: TestFunction::XPlusXSquared,
            std_window: (0.1, 0.5),
            terminal_only: false,
            samples: 400,
            schedule_demo: ScheduleDemoParams::default(),
            outputs: Outputs::default(),
        }
    }
}

/// One point of the parameter sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub g_kind: GKind,
    pub alpha: f64,
    pub c: f64,
    pub omega: f64,
}

impl Variant {
    pub fn label(&self) -> String {
        let g = serde_json::to_value(self.g_kind).expect("serializes");
        format!("{}_alpha{}_c{}_omega{}", g.as_str().unwrap_or("g"), self.alpha, self.c, self.omega)
    }
}

fn ridge_base() -> ExperimentConfig {
    ExperimentConfig {
        experiment: "ridge".into(),
        problem: PresetParams::ridge(),
        solver: SolverConfig {
            alpha: 1.5,
            c: 1.0,
            omega: 1.0,
            omega1: 1.0,
            horizon: 40.0,
            x0: vec![0.0; 3],
            ..SolverConfig::default()
        },
        alpha_values: Vec::new(),
        g_kinds: Vec::new(),
        test_function: TestFunction::SumExpNeg,
        ensemble: EnsembleParams { runs: 400, full_runs: Some(400), ..EnsembleParams::default() },
        std_window: (4.0, 40.0),
        ..ExperimentConfig::default()
    }
}

impl ExperimentConfig {
    /// Looks up a figure preset. `fig5_1b` is the same preset as `fig3_1b`,
    /// and `toy`, `ridge`, `lasso` name the headline figure of each problem.
    pub fn preset(name: &str) -> Result<Self> {
        let toy = |pipeline, m: Vec<i32>, alpha: Vec<f64>| ExperimentConfig {
            name: name.into(),
            pipeline,
            m_values: m,
            alpha_values: alpha,
            g_kinds: vec![GKind::Quadratic],
            ..ExperimentConfig::default()
        };
        let cfg = match name {
            "fig3_1a" | "fig5_1a" => toy(Pipeline::Overlay, vec![6], vec![1.5]),
            "fig3_1b" | "fig5_1b" | "toy" => ExperimentConfig { name: "fig3_1b".into(), ..ExperimentConfig::default() },
            "fig5_2" => {
                let mut c = toy(Pipeline::Samples, vec![6], vec![1.5]);
                c.ensemble.runs = 400;
                c.ensemble.full_runs = Some(400);
                c
            }
            "fig5_3" => {
                let mut c = toy(Pipeline::ErrorScan, vec![6], vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75]);
                c.ensemble.full_runs = Some(10_000);
                c
            }
            "fig5_4" => toy(Pipeline::StdScan, vec![5, 6, 7], vec![1.5]),
            "fig5_5" => {
                let mut c = toy(Pipeline::ResidualScan, (4..=9).collect(), vec![1.5, 1.0]);
                c.g_kinds = vec![GKind::Quadratic, GKind::L1];
                c.full_m_values = Some((4..=11).collect());
                c
            }
            "fig5_6" => {
                let mut c = toy(Pipeline::ResidualScan, (4..=9).collect(), vec![1.5]);
                c.full_m_values = Some((4..=11).collect());
                c
            }
            "fig5_7" | "ridge" => ExperimentConfig {
                name: "fig5_7".into(),
                pipeline: Pipeline::Overlay,
                m_values: vec![5, 6, 7],
                ..ridge_base()
            },
            "fig5_8" | "lasso" => {
                let mut c = ExperimentConfig {
                    name: "fig5_8".into(),
                    experiment: "lasso".into(),
                    problem: PresetParams::lasso(),
                    pipeline: Pipeline::Overlay,
                    m_values: vec![5, 6, 7],
                    test_function: TestFunction::Objective,
                    ..ridge_base()
                };
                c.ensemble.full_runs = Some(4000);
                c
            }
            "fig5_9" => {
                let mut c = ExperimentConfig {
                    name: name.into(),
                    pipeline: Pipeline::WeakError,
                    m_values: (4..=8).collect(),
                    terminal_only: true,
                    ..ridge_base()
                };
                c.ensemble.runs = 4000;
                c.ensemble.full_runs = Some(4000);
                c
            }
            "fig5_10" => {
                let mut c = ExperimentConfig {
                    name: name.into(),
                    pipeline: Pipeline::ErrorScan,
                    m_values: vec![8],
                    c_values: vec![0.15, 0.2, 0.5, 1.0],
                    omega_values: vec![1.0, 0.0],
                    ..ridge_base()
                };
                c.solver.alpha = 1.5;
                c
            }
            "fig5_11" => {
                let mut c = ExperimentConfig {
                    name: name.into(),
                    pipeline: Pipeline::ErrorScan,
                    m_values: vec![6, 8, 10, 12],
                    ..ridge_base()
                };
                c.solver.alpha = 2.02;
                c.solver.omega = 0.0;
                c.solver.omega1 = 1.0;
                c
            }
            "schedule_demo" => ExperimentConfig {
                name: name.into(),
                pipeline: Pipeline::ScheduleDemo,
                ..ExperimentConfig::default()
            },
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(cfg)
    }

    /// The published run count and m-grid where they differ from the
    /// desk-scale defaults.
    pub fn full_scale(mut self) -> Self {
        if let Some(r) = self.ensemble.full_runs {
            self.ensemble.runs = r;
        }
        if let Some(m) = self.full_m_values.take() {
            self.m_values = m;
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn problem_params(&self, g_kind: GKind) -> PresetParams {
        PresetParams { preset: self.experiment.clone(), g_kind, ..self.problem.clone() }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let gs = if self.g_kinds.is_empty() { vec![self.problem.g_kind] } else { self.g_kinds.clone() };
        let mut out = Vec::new();
        for &g_kind in &gs {
            for &alpha in &or(&self.alpha_values, self.solver.alpha) {
                for &c in &or(&self.c_values, self.solver.c) {
                    for &omega in &or(&self.omega_values, self.solver.omega) {
                        out.push(Variant { g_kind, alpha, c, omega });
                    }
                }
            }
        }
        out
    }

    /// Solver configuration for one variant at resolution `m`.
    pub fn solver_config(&self, v: &Variant, m: i32) -> SolverConfig {
        SolverConfig { alpha: v.alpha, c: v.c, omega: v.omega, ..self.solver.clone() }.with_resolution(m)
    }

    pub fn sme_config(&self, problem: &StochasticProblem, cfg: &SolverConfig) -> Result<SmeConfig> {
        let mut s = SmeConfig::from_solver(problem, cfg)?;
        s.em_substeps = self.sme.em_substeps;
        if let Some(mode) = self.sme.sigma_mode {
            s.sigma_mode = mode;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.pipeline == Pipeline::ScheduleDemo {
            return Ok(());
        }
        if self.m_values.is_empty() {
            return bad("m_values must not be empty");
        }
        let mut ms = self.m_values.clone();
        ms.sort_unstable();
        ms.dedup();
        if ms.len() != self.m_values.len() {
            return bad("m_values must be distinct");
        }
        if self.ensemble.runs == 0 {
            return bad("ensemble.runs must be >= 1");
        }
        if self.sme.em_substeps == 0 {
            return bad("sme.em_substeps must be >= 1");
        }
        if self.outputs.formats.is_empty() {
            return bad("outputs.formats must not be empty");
        }
        if !(self.std_window.0 <= self.std_window.1) {
            return bad("std_window must be an ordered pair");
        }
        match self.pipeline {
            Pipeline::WeakError | Pipeline::ResidualScan if self.m_values.len() < 3 => {
                return bad("this pipeline needs at least 3 m values")
            }
            Pipeline::StdScan if self.m_values.len() < 2 => return bad("std scan needs at least 2 m values"),
            _ => {}
        }
        for v in self.variants() {
            let problem = build_problem(&self.problem_params(v.g_kind))?;
            for &m in &self.m_values {
                self.solver_config(&v, m).validate(&problem)?;
            }
            if let TestFunction::Component(i) = self.test_function {
                if i >= problem.dim() {
                    return bad("test_function component out of range");
                }
            }
        }
        Ok(())
    }
}

/// Seed of one ensemble: `split_seed(base, h)` where `h` is the first 8
/// bytes (little endian) of SHA-256 of the label.
pub fn ensemble_seed(base_seed: u64, label: &str) -> u64 {
    let h = Sha256::digest(label.as_bytes());
    split_seed(base_seed, u64::from_le_bytes(h[..8].try_into().expect("8 bytes")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub label: String,
    pub seed: u64,
    pub runs: usize,
    pub diverged: usize,
    /// `split_seed(seed, i)` for each run.
    pub run_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub base_seed: u64,
    pub seed_rule: String,
    pub ensembles: Vec<EnsembleEntry>,
    /// Paths relative to the output directory and their SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Whether the run count matches the published figure.
    pub full_scale: bool,
    pub divergence_dominated: bool,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// Copy with the wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_seconds: 0.0, ..self.clone() }
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.16e}")
    }
}

/// Writes a header row and one row per entry. Non-integral values use 17
/// significant digits, so parsing the file gives back the same bits.
pub fn emit_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("nothing to write to {}", path.display())));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::DimensionMismatch(format!("row of {} values under {} columns", row.len(), header.len())));
        }
        w.write_record(row.iter().map(|&v| fmt_value(v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}

/// Reads a file written by [`emit_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::InvalidParameter(format!("bad cell {c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Collects outputs and seeds while a pipeline runs.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    workers: Option<usize>,
    dir: PathBuf,
    files: Vec<String>,
    ensembles: Vec<EnsembleEntry>,
    dominated: bool,
}

impl Run<'_> {
    fn csv(&mut self, name: &str, table: (Vec<String>, Vec<Vec<f64>>)) -> Result<Option<String>> {
        if !self.cfg.outputs.formats.contains(&Format::Csv) {
            return Ok(None);
        }
        emit_csv(&self.dir.join(name), &table.0, &table.1)?;
        self.files.push(name.to_string());
        Ok(Some(name.to_string()))
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        if !self.cfg.outputs.formats.contains(&Format::Json) {
            return Ok(());
        }
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join(name), serde_json::to_vec_pretty(value)?)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn record(&mut self, label: &str, seed: u64, stats: &EnsembleStats) {
        self.dominated |= stats.divergence_dominated();
        self.ensembles.push(EnsembleEntry {
            label: label.to_string(),
            seed,
            runs: stats.requested,
            diverged: stats.diverged,
            run_seeds: stats.seeds.clone(),
        });
    }

    fn admm(&mut self, problem: &StochasticProblem, cfg: &SolverConfig, label: &str) -> Result<EnsembleStats> {
        let label = format!("admm/{label}");
        let seed = ensemble_seed(self.cfg.ensemble.base_seed, &label);
        let stats = admm_ensemble(problem, cfg, self.cfg.ensemble.runs, seed, self.workers, self.cfg.test_function)?;
        self.record(&label, seed, &stats);
        Ok(stats)
    }

    fn sme(&mut self, problem: &StochasticProblem, cfg: &SolverConfig, label: &str) -> Result<EnsembleStats> {
        let label = format!("sme/{label}");
        let seed = ensemble_seed(self.cfg.ensemble.base_seed, &label);
        let sc = self.cfg.sme_config(problem, cfg)?;
        let stats = sme_ensemble(problem, &sc, self.cfg.ensemble.runs, seed, self.workers, self.cfg.test_function)?;
        self.record(&label, seed, &stats);
        Ok(stats)
    }
}

/// Minimizer used as the reference point of error scans: closed form for
/// ridge, otherwise the end of a long unit-preconditioned gradient flow.
pub fn reference_minimizer(cfg: &ExperimentConfig, problem: &StochasticProblem) -> Result<DVector<f64>> {
    if cfg.experiment == "ridge" {
        let p = &cfg.problem;
        return ridge_minimizer(problem.a(), p.beta.unwrap_or(0.2), &p.v_spec.build(p.d)?);
    }
    let d = problem.dim();
    let mhat = MHat::new(nalgebra::DMatrix::identity(d, d))?;
    let x0 = DVector::from_column_slice(&cfg.solver.x0);
    let flow = gradient_flow_reference(problem, &mhat, &x0, 200.0, 1.0)?;
    Ok(flow.xs.last().expect("nonempty").clone())
}

fn mhat_info(cfg: &SolverConfig, problem: &StochasticProblem) -> Value {
    let mh = m_hat(cfg, problem.a());
    json!({ "min_eigenvalue": mh.min_eigenvalue(), "positive_definite": mh.is_positive_definite() })
}

fn weak_points(a: &EnsembleStats, b: &EnsembleStats, terminal_only: bool) -> Result<WeakError> {
    if !terminal_only {
        return weak_error_detail(a, b);
    }
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::GridMismatch("terminal weak error needs matching grids".into()));
    }
    let k = a.len() - 1;
    let se = (a.se_phi(k).powi(2) + b.se_phi(k).powi(2)).sqrt();
    Ok(WeakError { err: (a.mean_phi[k] - b.mean_phi[k]).abs(), stderr: se, step: k })
}

fn pipeline_variant(run: &mut Run, v: &Variant) -> Result<Value> {
    let cfg = run.cfg;
    let problem = build_problem(&cfg.problem_params(v.g_kind))?;
    let vl = v.label();
    let mut out = serde_json::Map::new();
    out.insert("variant".into(), serde_json::to_value(v)?);
    let extrapolated = cfg.solver_config(v, cfg.m_values[0]).is_extrapolated();
    out.insert("extrapolated".into(), json!(extrapolated));
    match cfg.pipeline {
        Pipeline::Admm | Pipeline::Sme => {
            let mut per_m = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let label = format!("{vl}_m{m}");
                let (stats, traj_table) = if cfg.pipeline == Pipeline::Admm {
                    let stats = run.admm(&problem, &sc, &label)?;
                    let tr = Solver::new(&problem, &sc)?.run(stats.seeds[0], Some(cfg.test_function))?;
                    (stats, tr.table())
                } else {
                    let stats = run.sme(&problem, &sc, &label)?;
                    let tr = run_sme(&problem, &cfg.sme_config(&problem, &sc)?, stats.seeds[0], Some(cfg.test_function))?;
                    (stats, tr.table())
                };
                let kind = if cfg.pipeline == Pipeline::Admm { "admm" } else { "sme" };
                let stats_csv = run.csv(&format!("{kind}_{label}.csv"), stats.table())?;
                let traj_csv = run.csv(&format!("{kind}_{label}_run0.csv"), traj_table)?;
                per_m.push(json!({
                    "m": m, "epsilon": sc.epsilon(), "runs": stats.requested, "diverged": stats.diverged,
                    "stats_csv": stats_csv, "trajectory_csv": traj_csv,
                    "terminal_mean_phi": stats.mean_phi.last(), "terminal_se_phi": stats.se_phi(stats.len() - 1),
                }));
            }
            out.insert("per_m".into(), json!(per_m));
        }
        Pipeline::Overlay => {
            let mut per_m = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let label = format!("{vl}_m{m}");
                let a = run.admm(&problem, &sc, &label)?;
                let b = run.sme(&problem, &sc, &label)?;
                let ca = run.csv(&format!("admm_{label}.csv"), a.table())?;
                let cb = run.csv(&format!("sme_{label}.csv"), b.table())?;
                let w = weak_error_detail(&a, &b)?;
                per_m.push(json!({
                    "m": m, "epsilon": sc.epsilon(), "admm_csv": ca, "sme_csv": cb,
                    "weak_error": w.err, "weak_error_stderr": w.stderr,
                    "max_mean_zscore": max_mean_zscore(&a, &b)?,
                    "max_std_gap": max_std_gap(&a, &b, cfg.std_window)?,
                    "max_relative_phi_gap": max_relative_phi_gap(&a, &b)?,
                    "diverged": [a.diverged, b.diverged],
                }));
            }
            out.insert("per_m".into(), json!(per_m));
        }
        Pipeline::WeakError => {
            let mut points = Vec::new();
            let mut per_step = Vec::new();
            let mut seeds = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let label = format!("{vl}_m{m}");
                let a = run.admm(&problem, &sc, &label)?;
                let b = run.sme(&problem, &sc, &label)?;
                seeds.push(run.ensembles[run.ensembles.len() - 2].seed);
                seeds.push(run.ensembles[run.ensembles.len() - 1].seed);
                for k in 0..a.len() {
                    per_step.push(vec![
                        m as f64,
                        k as f64,
                        a.ts[k],
                        a.mean_phi[k],
                        b.mean_phi[k],
                        a.se_phi(k),
                        b.se_phi(k),
                        (a.mean_phi[k] - b.mean_phi[k]).abs(),
                    ]);
                }
                points.push(weak_points(&a, &b, cfg.terminal_only)?);
            }
            let report = WeakErrorReport::new(cfg.m_values.clone(), &points)?;
            let header = ["m", "k", "t", "mean_phi_admm", "mean_phi_sme", "se_phi_admm", "se_phi_sme", "abs_diff"]
                .map(String::from)
                .to_vec();
            let per_step_csv = run.csv(&format!("weak_error_{vl}_per_step.csv"), (header, per_step))?;
            let err_csv = run.csv(&format!("weak_error_{vl}.csv"), report.table())?;
            let doc = json!({
                "experiment": cfg.name,
                "config": cfg,
                "m_values": report.m_values,
                "errs": report.errs,
                "slope": report.slope,
                "slope_ci": report.slope_ci,
                "per_step_csv_path": per_step_csv,
                "seeds": seeds,
            });
            run.json(&format!("weak_error_{vl}.json"), &doc)?;
            out.insert("errs".into(), json!(report.errs));
            out.insert("stderrs".into(), json!(report.stderrs));
            out.insert("slope".into(), json!(report.slope));
            out.insert("slope_ci".into(), json!(report.slope_ci));
            out.insert("csv".into(), json!(err_csv));
        }
        Pipeline::ResidualScan => {
            let mut stats = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let label = format!("{vl}_m{m}");
                let a = run.admm(&problem, &sc, &label)?;
                run.csv(&format!("admm_{label}.csv"), a.table())?;
                stats.push(a);
            }
            let report = residual_scaling(&cfg.m_values, &stats)?;
            let csv = run.csv(&format!("residual_{vl}.csv"), report.table())?;
            out.insert("report".into(), serde_json::to_value(&report)?);
            out.insert("csv".into(), json!(csv));
        }
        Pipeline::StdScan => {
            let mut stats = Vec::new();
            let mut eps = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let a = run.admm(&problem, &sc, &format!("{vl}_m{m}"))?;
                eps.push(sc.epsilon());
                stats.push(a);
            }
            let report = std_scaling(&eps, &stats, cfg.std_window)?;
            let mut header = vec!["t".to_string()];
            let d = problem.dim();
            for &m in &cfg.m_values {
                header.extend((0..d).map(|i| format!("m{m}_std_x_{i}")));
                if report.curves_z.is_some() {
                    header.extend((0..problem.constraint_dim()).map(|i| format!("m{m}_std_z_{i}")));
                }
            }
            let rows = (0..report.ts.len())
                .map(|j| {
                    let mut row = vec![report.ts[j]];
                    for e in 0..eps.len() {
                        row.extend(report.curves_x[e][j].iter());
                        if let Some(cz) = &report.curves_z {
                            row.extend(cz[e][j].iter());
                        }
                    }
                    row
                })
                .collect();
            let csv = run.csv(&format!("std_scan_{vl}.csv"), (header, rows))?;
            out.insert("max_gap_x".into(), json!(report.max_gap_x));
            out.insert("max_gap_z".into(), json!(report.max_gap_z));
            out.insert("csv".into(), json!(csv));
        }
        Pipeline::Samples => {
            let n = cfg.samples.min(cfg.ensemble.runs).max(1);
            let mut per_m = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let label = format!("{vl}_m{m}");
                let a = run.admm(&problem, &sc, &label)?;
                let b = run.sme(&problem, &sc, &label)?;
                let solver = Solver::new(&problem, &sc)?;
                let sme_cfg = cfg.sme_config(&problem, &sc)?;
                let pool = pool(run.workers)?;
                let work = || -> Result<(Vec<_>, Vec<_>)> {
                    let xs = a.seeds[..n].par_iter().map(|&s| solver.run(s, None).map(|t| t.xs)).collect::<Result<Vec<_>>>()?;
                    let ys = b.seeds[..n]
                        .par_iter()
                        .map(|&s| run_sme(&problem, &sme_cfg, s, None).map(|t| t.xs))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((xs, ys))
                };
                let (xs, ys) = match &pool {
                    Some(p) => p.install(work)?,
                    None => work()?,
                };
                let mut files = Vec::new();
                for (kind, paths, ts) in [("admm", &xs, &a.ts), ("sme", &ys, &b.ts)] {
                    let d = problem.dim();
                    let mut header = vec!["t".to_string()];
                    for j in 0..n {
                        header.extend((0..d).map(|i| format!("run{j}_x{i}")));
                    }
                    let rows = (0..ts.len())
                        .map(|k| {
                            let mut row = vec![ts[k]];
                            for p in paths.iter() {
                                // diverged paths stop early; pad with NaN
                                match p.get(k) {
                                    Some(x) => row.extend(x.iter()),
                                    None => row.extend(std::iter::repeat_n(f64::NAN, d)),
                                }
                            }
                            row
                        })
                        .collect();
                    files.push(run.csv(&format!("samples_{kind}_{label}.csv"), (header, rows))?);
                    let stats = if kind == "admm" { &a } else { &b };
                    files.push(run.csv(&format!("{kind}_{label}.csv"), stats.table())?);
                }
                per_m.push(json!({ "m": m, "samples": n, "files": files }));
            }
            out.insert("per_m".into(), json!(per_m));
        }
        Pipeline::ErrorScan => {
            let x_star = reference_minimizer(cfg, &problem)?;
            out.insert("x_star".into(), json!(x_star.as_slice()));
            let mut per_m = Vec::new();
            for &m in &cfg.m_values {
                let sc = cfg.solver_config(v, m);
                let label = format!("{vl}_m{m}");
                let mhat = mhat_info(&sc, &problem);
                let lab = format!("admm/{label}");
                let seed = ensemble_seed(cfg.ensemble.base_seed, &lab);
                let stats = match admm_ensemble(&problem, &sc, cfg.ensemble.runs, seed, run.workers, cfg.test_function) {
                    Ok(s) => s,
                    Err(Error::AllDiverged { runs }) => {
                        run.ensembles.push(EnsembleEntry {
                            label: lab,
                            seed,
                            runs,
                            diverged: runs,
                            run_seeds: crate::ensemble::ensemble_seeds(seed, runs),
                        });
                        per_m.push(json!({ "m": m, "epsilon": sc.epsilon(), "mhat": mhat, "runs": runs, "diverged": runs }));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                // divergence is the measured outcome here, not a failure
                run.ensembles.push(EnsembleEntry {
                    label: lab,
                    seed,
                    runs: stats.requested,
                    diverged: stats.diverged,
                    run_seeds: stats.seeds.clone(),
                });
                let d = problem.dim();
                let mut header: Vec<String> = ["t", "mean_phi", "std_phi", "err_norm", "std_norm"].map(String::from).to_vec();
                header.extend((0..d).map(|i| format!("mean_err_{i}")));
                let rows = (0..stats.len())
                    .map(|k| {
                        let e = &stats.mean_x[k] - &x_star;
                        let mut row = vec![stats.ts[k], stats.mean_phi[k], stats.std_phi[k], e.norm(), stats.std_x[k].norm()];
                        row.extend(e.iter());
                        row
                    })
                    .collect();
                let csv = run.csv(&format!("error_{label}.csv"), (header, rows))?;
                let last = stats.len() - 1;
                per_m.push(json!({
                    "m": m, "epsilon": sc.epsilon(), "mhat": mhat, "runs": stats.requested, "diverged": stats.diverged,
                    "terminal_err_norm": (&stats.mean_x[last] - &x_star).norm(), "csv": csv,
                }));
            }
            out.insert("per_m".into(), json!(per_m));
        }
        Pipeline::ScheduleDemo => unreachable!("handled before variants"),
    }
    Ok(Value::Object(out))
}

fn pool(workers: Option<usize>) -> Result<Option<rayon::ThreadPool>> {
    workers
        .map(|w| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
        })
        .transpose()
}

/// Runs the configured pipeline, writes its artifacts under
/// `outputs.directory` and returns the manifest (also written there as
/// `manifest.json`). `workers = None` uses the global thread pool.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = cfg.outputs.directory.clone();
    fs::create_dir_all(&dir)?;
    let mut run = Run { cfg, workers, dir: dir.clone(), files: Vec::new(), ensembles: Vec::new(), dominated: false };
    let results = if cfg.pipeline == Pipeline::ScheduleDemo {
        let seed = ensemble_seed(cfg.ensemble.base_seed, "schedule_demo");
        let report = schedule_demo(&cfg.schedule_demo, seed)?;
        run.ensembles.push(EnsembleEntry {
            label: "schedule_demo".into(),
            seed,
            runs: cfg.schedule_demo.runs,
            diverged: 0,
            run_seeds: Vec::new(),
        });
        let csv = run.csv("schedule_demo.csv", report.table())?;
        vec![json!({ "t_star": report.t_star, "policies": report.policies, "terminal_ev": report.terminal_ev, "csv": csv })]
    } else {
        cfg.variants().iter().map(|v| pipeline_variant(&mut run, v)).collect::<Result<Vec<_>>>()?
    };
    let report = json!({
        "experiment": cfg.name,
        "problem": cfg.experiment,
        "pipeline": cfg.pipeline,
        "runs": cfg.ensemble.runs,
        "full_runs": cfg.ensemble.full_runs,
        "results": results,
    });
    run.json("report.json", &report)?;
    let mut outputs = BTreeMap::new();
    for f in &run.files {
        outputs.insert(f.clone(), sha256_file(&dir.join(f))?);
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        base_seed: cfg.ensemble.base_seed,
        seed_rule: "ensemble seed = split_seed(base_seed, le_u64(sha256(label)[..8])); run i = split_seed(ensemble seed, i)"
            .into(),
        ensembles: run.ensembles,
        outputs,
        full_scale: cfg.ensemble.full_runs.is_none_or(|r| r == cfg.ensemble.runs),
        divergence_dominated: run.dominated,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(name).unwrap();
        c.ensemble.runs = 16;
        c.outputs.directory = dir.to_path_buf();
        c
    }

    #[test]
    fn every_preset_builds_and_validates() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            c.clone().full_scale().validate().unwrap();
        }
        assert_eq!(ExperimentConfig::preset("fig5_1b").unwrap(), ExperimentConfig::preset("fig3_1b").unwrap());
        assert!(matches!(ExperimentConfig::preset("fig9"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn defaults_are_the_toy_sweep() {
        let c = ExperimentConfig::default();
        assert_eq!(c.solver.horizon, 0.5);
        assert_eq!(c.m_values, (4..=11).collect::<Vec<_>>());
        assert_eq!(c.test_function, TestFunction::XPlusXSquared);
        assert_eq!(c.solver.x0, vec![1.0]);
        assert_eq!(c.ensemble.runs, 10_000);
        let f = c.full_scale();
        assert_eq!(f.ensemble.runs, 100_000);
    }

    #[test]
    fn ridge_preset_settings() {
        let c = ExperimentConfig::preset("fig5_7").unwrap();
        let p = &c.problem;
        assert_eq!((p.d, p.sigma_zeta_sq), (3, 0.1));
        assert_eq!(p.beta.unwrap_or(0.2), 0.2);
        let s = &c.solver;
        assert_eq!((s.horizon, s.c, s.omega, s.omega1, s.alpha), (40.0, 1.0, 1.0, 1.0, 1.5));
        assert_eq!(c.ensemble.runs, 400);
        assert_eq!(ExperimentConfig::preset("fig5_8").unwrap().full_scale().ensemble.runs, 4000);
    }

    #[test]
    fn empty_or_repeated_grid_is_rejected() {
        let mut c = ExperimentConfig::default();
        c.m_values.clear();
        assert!(matches!(c.validate(), Err(Error::InvalidParameter(_))));
        c.m_values = vec![4, 4, 5];
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"m_values": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        ExperimentConfig::from_json(r#"{"m_values": [4, 5, 6]}"#).unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(c, back);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let rows = vec![vec![0.0, 0.1, 1.0 / 3.0], vec![1.0, -2.5e-300, f64::NAN], vec![2.0, 1e20, -0.0], vec![3.0, 7.0, 1.0]];
        emit_csv(&p, &["step".into(), "a".into(), "b".into()], &rows).unwrap();
        let (h, back) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["step", "a", "b"]);
        assert_eq!(back.len(), 4);
        for (r, s) in rows.iter().zip(&back) {
            for (x, y) in r.iter().zip(s) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()), "{x} {y}");
            }
        }
        assert!(emit_csv(&p, &["a".into()], &[]).is_err());
    }

    #[test]
    fn trajectory_with_three_steps_gives_four_rows() {
        let dir = tempfile::tempdir().unwrap();
        let problem = build_problem(&PresetParams::toy(GKind::Quadratic)).unwrap();
        let cfg = SolverConfig { rho: 6.0, horizon: 0.5, ..SolverConfig::default() };
        let tr = Solver::new(&problem, &cfg).unwrap().run(1, Some(TestFunction::XPlusXSquared)).unwrap();
        let (h, rows) = tr.table();
        let p = dir.path().join("t.csv");
        emit_csv(&p, &h, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("step,t,x_0,z_0,u_0,r_norm,ralpha_norm,phi"));
    }

    #[test]
    fn weak_error_report_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small("fig3_1b", dir.path());
        c.m_values = vec![3, 4, 5];
        c.alpha_values = vec![1.5];
        c.g_kinds = vec![GKind::Quadratic];
        let m = run_experiment(&c, Some(1)).unwrap();
        let (h, rows) = read_csv(&dir.path().join("weak_error_quadratic_alpha1.5_c1_omega1.csv")).unwrap();
        assert_eq!(h, vec!["m", "err", "stderr"]);
        assert_eq!(rows.len(), 3);
        let doc: Value =
            serde_json::from_slice(&fs::read(dir.path().join("weak_error_quadratic_alpha1.5_c1_omega1.json")).unwrap()).unwrap();
        for key in ["experiment", "config", "m_values", "errs", "slope", "slope_ci", "per_step_csv_path", "seeds"] {
            assert!(doc.get(key).is_some(), "{key}");
        }
        assert_eq!(m.base_seed, c.ensemble.base_seed);
        assert_eq!(m.ensembles.len(), 6);
        assert_eq!(m.ensembles[0].run_seeds, crate::ensemble::ensemble_seeds(m.ensembles[0].seed, 16));
        assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
        assert!(!m.full_scale);
    }

    #[test]
    fn rerun_gives_identical_manifest_and_digests() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut a = small("fig3_1a", d1.path());
        a.m_values = vec![4];
        let mut b = a.clone();
        b.outputs.directory = d2.path().to_path_buf();
        let ma = run_experiment(&a, Some(1)).unwrap();
        let mb = run_experiment(&b, Some(3)).unwrap();
        assert_eq!(ma.outputs, mb.outputs);
        assert_eq!(ma.ensembles, mb.ensembles);
        // rerun from the manifest's own config snapshot
        let mut again = ma.config.clone();
        let d3 = tempfile::tempdir().unwrap();
        again.outputs.directory = d3.path().to_path_buf();
        assert_eq!(run_experiment(&again, None).unwrap().outputs, ma.outputs);
        let mut x = ma.without_timing();
        x.config.outputs.directory = PathBuf::new();
        let mut y = mb.without_timing();
        y.config.outputs.directory = PathBuf::new();
        assert_eq!(x, y);
    }

    #[test]
    fn ensemble_seeds_differ_by_label() {
        assert_ne!(ensemble_seed(1, "admm/a"), ensemble_seed(1, "sme/a"));
        assert_eq!(ensemble_seed(1, "admm/a"), ensemble_seed(1, "admm/a"));
    }

    #[test]
    fn error_scan_tolerates_total_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small("fig5_11", dir.path());
        c.m_values = vec![12];
        c.solver.divergence_threshold = 1e3;
        let m = run_experiment(&c, None).unwrap();
        assert!(m.ensembles[0].diverged > 0);
        assert!(!m.divergence_dominated);
    }

    #[test]
    fn schedule_demo_pipeline_writes_curves() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small("schedule_demo", dir.path());
        c.schedule_demo.runs = 50;
        c.schedule_demo.horizon = 1.0;
        let m = run_experiment(&c, None).unwrap();
        assert!(m.outputs.contains_key("schedule_demo.csv"));
        let (h, _) = read_csv(&dir.path().join("schedule_demo.csv")).unwrap();
        assert_eq!(h[0], "t");
        assert_eq!(h.len(), 5);
    }

    #[test]
    fn toy_reference_minimizer() {
        let c = ExperimentConfig::default();
        let p = build_problem(&c.problem_params(GKind::Quadratic)).unwrap();
        let x = reference_minimizer(&c, &p).unwrap();
        assert!((x[0] - 0.16374).abs() < 1e-3, "{x}");
    }
}
