//! `gsadmm`: runs G-sADMM / SME experiments from JSON configs or named presets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence-dominated
//! ensembles (more than half the runs of some ensemble diverged, or all of
//! them), 1 anything else.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsadmm::experiment::{run_experiment, ExperimentConfig, Pipeline, PRESETS};
use gsadmm::Error;

#[derive(Parser, Debug)]
#[command(name = "gsadmm", version, about = "Stochastic ADMM vs. its modified equation: ensembles, weak error, scaling scans")]
struct Cli {
    /// JSON experiment config; fields left out take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every ensemble.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Changes speed only, never results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Runs per ensemble.
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// ADMM ensemble statistics per m.
    RunAdmm,
    /// SME ensemble statistics per m.
    RunSme,
    /// Weak error over the m-grid with the fitted order.
    WeakError,
    /// Residual and alpha-residual decay over the m-grid.
    ResidualScan,
    /// Rescaled standard deviations over the m-grid.
    StdScan,
    /// Constant vs. adaptive step-size and batch schedules on a 1-D quadratic.
    ScheduleDemo,
    /// Run a named figure preset.
    Experiment {
        /// Preset name; `list` prints the available names.
        preset: String,
        /// Use the published run counts and m-grid.
        #[arg(long)]
        full_scale: bool,
    },
}

enum Failure {
    Config(String),
    Diverged(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::AllDiverged { .. } => Failure::Diverged(e.to_string()),
            Error::InvalidParameter(_)
            | Error::UnknownPreset(_)
            | Error::DimensionMismatch(_)
            | Error::RankDeficient { .. }
            | Error::IndefiniteMhat { .. }
            | Error::Unsupported(_)
            | Error::ScheduleUndefined(_)
            | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn pipeline_default(pipeline: Pipeline) -> ExperimentConfig {
    let name = match pipeline {
        Pipeline::Admm | Pipeline::Sme | Pipeline::Overlay | Pipeline::Samples => "fig3_1a",
        Pipeline::WeakError => "fig3_1b",
        Pipeline::ResidualScan => "fig5_5",
        Pipeline::StdScan => "fig5_4",
        Pipeline::ErrorScan => "fig5_3",
        Pipeline::ScheduleDemo => "schedule_demo",
    };
    ExperimentConfig { pipeline, ..ExperimentConfig::preset(name).expect("built-in preset") }
}

fn build_config(cli: &Cli) -> Result<Option<ExperimentConfig>, Failure> {
    let pipeline = match &cli.command {
        Command::RunAdmm => Pipeline::Admm,
        Command::RunSme => Pipeline::Sme,
        Command::WeakError => Pipeline::WeakError,
        Command::ResidualScan => Pipeline::ResidualScan,
        Command::StdScan => Pipeline::StdScan,
        Command::ScheduleDemo => Pipeline::ScheduleDemo,
        Command::Experiment { preset, .. } if preset == "list" => {
            for p in PRESETS {
                println!("{p}");
            }
            println!("schedule_demo");
            return Ok(None);
        }
        Command::Experiment { preset, full_scale } => {
            if cli.config.is_some() {
                return Err(Failure::Config("--config cannot be combined with a preset".into()));
            }
            let cfg = ExperimentConfig::preset(preset)?;
            let cfg = if *full_scale { cfg.full_scale() } else { cfg };
            return overrides(cli, cfg).map(Some);
        }
    };
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig { pipeline, ..ExperimentConfig::from_json(&text)? }
        }
        None => pipeline_default(pipeline),
    };
    overrides(cli, cfg).map(Some)
}

fn overrides(cli: &Cli, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, Failure> {
    if let Some(s) = cli.seed {
        cfg.ensemble.base_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.outputs.directory = o.clone();
    }
    if let Some(r) = cli.runs {
        cfg.ensemble.runs = r;
        cfg.schedule_demo.runs = r;
    }
    if cli.workers == Some(0) {
        return Err(Failure::Config("--workers must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let Some(cfg) = build_config(cli)? else {
        return Ok(());
    };
    let manifest = run_experiment(&cfg, cli.workers)?;
    let dir = cfg.outputs.directory.display();
    println!(
        "{}: {} files in {dir} ({} ensembles, {:.1}s)",
        cfg.name,
        manifest.outputs.len() + 1,
        manifest.ensembles.len(),
        manifest.wall_clock_seconds
    );
    if !manifest.full_scale {
        println!("note: desk-scale run counts; pass --full-scale to `experiment` for the published counts");
    }
    let diverged: Vec<String> = manifest
        .ensembles
        .iter()
        .filter(|e| e.diverged > 0)
        .map(|e| format!("{} {}/{}", e.label, e.diverged, e.runs))
        .collect();
    if !diverged.is_empty() {
        println!("diverged runs: {}", serde_json::to_string(&diverged).expect("strings serialize"));
    }
    if manifest.divergence_dominated {
        return Err(Failure::Diverged("more than half the runs of an ensemble diverged".into()));
    }
    Ok(())
}

fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            2
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("divergence: {m}");
            3
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn args(dir: &std::path::Path, rest: &[&str]) -> Vec<String> {
        let mut v = vec!["gsadmm".to_string(), "--out".into(), dir.display().to_string()];
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }

    #[test]
    fn small_admm_run_succeeds_and_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run(args(dir.path(), &["--runs", "8", "run-admm"])), 0);
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("admm_quadratic_alpha1.5_c1_omega1_m6.csv").exists());
    }

    #[test]
    fn worker_count_does_not_change_outputs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(run(args(a.path(), &["--runs", "40", "--workers", "1", "--seed", "5", "run-sme"])), 0);
        assert_eq!(run(args(b.path(), &["--runs", "40", "--workers", "3", "--seed", "5", "run-sme"])), 0);
        let f = "sme_quadratic_alpha1.5_c1_omega1_m6.csv";
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }

    #[test]
    fn config_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run(args(dir.path(), &["experiment", "fig99"])), 2);
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"m_values": []}"#).unwrap();
        assert_eq!(run(args(dir.path(), &["--config", cfg.to_str().unwrap(), "weak-error"])), 2);
        fs::write(&cfg, r#"{"solver": {"alpha": 1.5, "rh0": 3}}"#).unwrap();
        assert_eq!(run(args(dir.path(), &["--config", cfg.to_str().unwrap(), "run-admm"])), 2);
        fs::write(&cfg, "not json").unwrap();
        assert_eq!(run(args(dir.path(), &["--config", cfg.to_str().unwrap(), "run-admm"])), 2);
        assert_eq!(run(args(dir.path(), &["--bogus-flag", "run-admm"])), 2);
        assert_eq!(run(args(dir.path(), &["--workers", "0", "run-admm"])), 2);
    }

    #[test]
    fn diverging_config_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(
            &cfg,
            r#"{"pipeline": "admm", "m_values": [11], "alpha_values": [2.02], "g_kinds": ["quadratic"],
                "solver": {"c": 0.5, "omega": 1.0, "omega1": 1.0}, "ensemble": {"runs": 4}}"#,
        )
        .unwrap();
        assert_eq!(run(args(dir.path(), &["--config", cfg.to_str().unwrap(), "run-admm"])), 3);
    }

    #[test]
    fn config_file_drives_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(
            &cfg,
            r#"{"m_values": [3, 4, 5], "alpha_values": [1.0], "g_kinds": ["l1"], "ensemble": {"runs": 20, "base_seed": 3}}"#,
        )
        .unwrap();
        assert_eq!(run(args(dir.path(), &["--config", cfg.to_str().unwrap(), "weak-error"])), 0);
        let report: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("weak_error_l1_alpha1_c1_omega1.json")).unwrap()).unwrap();
        assert_eq!(report["m_values"], serde_json::json!([3, 4, 5]));
        assert_eq!(run(args(dir.path(), &["--config", cfg.to_str().unwrap(), "residual-scan"])), 0);
        assert!(dir.path().join("residual_l1_alpha1_c1_omega1.csv").exists());
    }

    #[test]
    fn schedule_demo_and_preset_listing() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run(args(dir.path(), &["--runs", "20", "schedule-demo"])), 0);
        assert!(dir.path().join("schedule_demo.csv").exists());
        assert_eq!(run(args(dir.path(), &["experiment", "list"])), 0);
        assert_eq!(run(args(dir.path(), &["--config", "x.json", "experiment", "fig5_4"])), 2);
    }

    #[test]
    fn std_scan_preset_runs_small() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run(args(dir.path(), &["--runs", "30", "std-scan"])), 0);
        assert!(dir.path().join("std_scan_quadratic_alpha1.5_c1_omega1.csv").exists());
    }
}
