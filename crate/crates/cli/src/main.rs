use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Failure;

/// Camera-lidar extrinsic calibration with VOQ-based pose-set selection.
#[derive(Debug, Parser)]
#[command(name = "voqcal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every 3-pose set and write the sorted assessment CSV.
    Assess(RunArgs),
    /// Full calibration: assess, select, solve, aggregate.
    Calibrate(RunArgs),
    /// Reprojection statistics of a calibration over the evaluation poses.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic pose directory from a scene spec.
    Simulate(SimulateArgs),
    /// Render a pointcloud projected into the image as PPM.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Pose directory containing poses.csv.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the configured RANSAC seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of best sets to solve.
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    /// Enable Gauss-Newton refinement of each per-set solution.
    #[arg(long)]
    pub refine: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Calibration report JSON.
    #[arg(long, value_name = "PATH")]
    pub calibration: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene spec (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub calibration: PathBuf,
    /// Pointcloud CSV to project.
    #[arg(long, value_name = "PATH", conflicts_with = "pose")]
    pub cloud: Option<PathBuf>,
    /// Pose id inside --data to project.
    #[arg(long, value_name = "ID")]
    pub pose: Option<String>,
    /// Background image (binary PPM) of the configured image size.
    #[arg(long, value_name = "PATH")]
    pub image: Option<PathBuf>,
    /// Colour ramp start and end, metres.
    #[arg(long, value_name = "M", num_args = 2, default_values_t = [3.0, 20.0])]
    pub depth_range: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Assess(a) => commands::assess(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Project(a) => commands::project(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
