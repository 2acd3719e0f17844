//! Pipeline driver around the `scene4d` library: classify, trajectory,
//! simulate, reconstruct, and evaluate stages, each writing its
//! artifacts under `<out>/<stage>/` and recording them in
//! `<out>/manifest.json`. Identical configuration and seed produce
//! byte-identical artifacts.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};

pub use config::{Config, Overrides, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl CliError {
    /// Process exit code: 2 for configuration errors, 1 for stage
    /// failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

/// Subcommand selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Classify,
    Trajectory,
    Simulate,
    Reconstruct,
    Evaluate,
    Pipeline,
}

type StageFn = fn(&Config, &Path) -> Result<Vec<String>, CliError>;

/// All stages in pipeline order.
const PIPELINE: [(&str, StageFn); 5] = [
    ("classify", stages::run_classify),
    ("trajectory", stages::run_trajectory),
    ("simulate", stages::run_simulate),
    ("reconstruct", stages::run_reconstruct),
    ("evaluate", stages::run_evaluate),
];

impl Command {
    fn stages(self) -> &'static [(&'static str, StageFn)] {
        match self {
            Command::Classify => &PIPELINE[0..1],
            Command::Trajectory => &PIPELINE[1..2],
            Command::Simulate => &PIPELINE[2..3],
            Command::Reconstruct => &PIPELINE[3..4],
            Command::Evaluate => &PIPELINE[4..5],
            Command::Pipeline => &PIPELINE[..],
        }
    }
}

/// Loads and validates the configuration, runs the selected stages, and
/// updates the manifest after each one. Returns the output directory.
pub fn run(
    command: Command,
    config_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<PathBuf, CliError> {
    let mut cfg = Config::load(config_path).map_err(CliError::Config)?;
    cfg.apply_overrides(overrides);
    cfg.validate().map_err(CliError::Config)?;
    let out = overrides
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            out.display()
        ))
    })?;
    let sha = cfg.sha256();
    manifest::check_compatible(&out, &sha, cfg.seed)?;
    for (name, stage) in command.stages() {
        let files = stage(&cfg, &out)?;
        manifest::record_stage(&out, &sha, cfg.seed, name, files)?;
    }
    Ok(out)
}
