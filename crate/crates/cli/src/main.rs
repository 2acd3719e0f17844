use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scene4d::trajectory::MotionType;
use scene4d_cli::{run, Command, Overrides};

/// 4D scene pipeline: canonical camera trajectories, oracle
/// observations, point-cloud reconstruction, and evaluation.
#[derive(Parser)]
#[command(name = "scene4d", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    opts: GlobalOpts,
}

#[derive(Args)]
struct GlobalOpts {
    /// Configuration JSON; defaults apply when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the configured camera motion (e.g. orbit, zoom-in)
    #[arg(long, global = true, value_name = "LABEL")]
    motion: Option<String>,
    /// Overrides the configured trajectory length
    #[arg(long, global = true, value_name = "T")]
    frames: Option<usize>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the few-shot motion classifier and classify queries
    Classify,
    /// Generate the camera pose sequence
    Trajectory,
    /// Render oracle observations along the trajectory
    Simulate,
    /// Segment motion, fuse point clouds, fit the feature field
    Reconstruct,
    /// Score the reconstruction against the oracle
    Evaluate,
    /// Run every stage in order
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let motion = match cli
        .opts
        .motion
        .as_deref()
        .map(str::parse::<MotionType>)
        .transpose()
    {
        Ok(motion) => motion,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let overrides = Overrides {
        seed: cli.opts.seed,
        motion,
        frames: cli.opts.frames,
        out: cli.opts.out,
    };
    let command = match cli.command {
        Cmd::Classify => Command::Classify,
        Cmd::Trajectory => Command::Trajectory,
        Cmd::Simulate => Command::Simulate,
        Cmd::Reconstruct => Command::Reconstruct,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Pipeline => Command::Pipeline,
    };
    match run(command, cli.opts.config.as_deref(), &overrides) {
        Ok(out) => {
            println!("ok: manifest at {}", out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
