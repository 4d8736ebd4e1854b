//! `xmreg`: LiDAR-camera registration from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmreg_core::dataio::config::RunConfig;
use xmreg_core::dataio::DataError;

mod commands;
mod viz;

/// Exit status of a failed registration (no pose found).
pub const EXIT_REGISTRATION: u8 = 2;
/// Exit status of unreadable or malformed input, including bad arguments.
pub const EXIT_INPUT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "xmreg", version, about = "LiDAR-camera extrinsic registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project a scan into range/reflectance maps and previews.
    Project(commands::ProjectArgs),
    /// Compute builtin features of a camera image or a scan.
    Extract(commands::ExtractArgs),
    /// Match feature files and write correspondences.
    Match(commands::MatchArgs),
    /// Register one pair and write the pose, matches and a visualization.
    Register(commands::RegisterArgs),
    /// Evaluate every frame of a manifest.
    Evaluate(commands::EvaluateArgs),
    /// Write a synthetic scene and its ground truth.
    Synth(commands::SynthArgs),
    /// Evaluate a manifest for several top-k values.
    AblateTopk(commands::AblateArgs),
}

/// Config file plus one flag per config key.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_width: Option<String>,
    #[arg(long)]
    image_height: Option<String>,
    #[arg(long)]
    map_width: Option<String>,
    #[arg(long)]
    map_height: Option<String>,
    #[arg(long)]
    range_max: Option<String>,
    #[arg(long)]
    d_patch: Option<String>,
    #[arg(long)]
    d_pixel: Option<String>,
    /// `auto` (ideal codes on synthetic frames) or `builtin`.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    top_k: Option<String>,
    #[arg(long)]
    ransac_max_iterations: Option<String>,
    #[arg(long)]
    ransac_threshold: Option<String>,
    #[arg(long)]
    ransac_min_inliers: Option<String>,
    #[arg(long)]
    ransac_confidence: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    max_xy_translation: Option<String>,
    #[arg(long)]
    yaw_range: Option<String>,
    #[arg(long)]
    success_rte: Option<String>,
    #[arg(long)]
    success_rre: Option<String>,
    /// `zyx` or `xyz`.
    #[arg(long)]
    euler: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, DataError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("image_width", &self.image_width),
            ("image_height", &self.image_height),
            ("map_width", &self.map_width),
            ("map_height", &self.map_height),
            ("range_max", &self.range_max),
            ("d_patch", &self.d_patch),
            ("d_pixel", &self.d_pixel),
            ("features", &self.features),
            ("top_k", &self.top_k),
            ("ransac_max_iterations", &self.ransac_max_iterations),
            ("ransac_threshold", &self.ransac_threshold),
            ("ransac_min_inliers", &self.ransac_min_inliers),
            ("ransac_confidence", &self.ransac_confidence),
            ("seed", &self.seed),
            ("max_xy_translation", &self.max_xy_translation),
            ("yaw_range", &self.yaw_range),
            ("success_rte", &self.success_rte),
            ("success_rre", &self.success_rre),
            ("euler", &self.euler),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Project(a) => commands::project(a),
        Command::Extract(a) => commands::extract(a),
        Command::Match(a) => commands::match_cmd(a),
        Command::Register(a) => commands::register(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
        Command::AblateTopk(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
