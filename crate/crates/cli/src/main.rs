mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use msp_core::scene::CloudFormat;

/// Masked shape prediction pre-training and probes for 3D point clouds.
#[derive(Debug, Parser)]
#[command(name = "msp", version)]
pub struct Cli {
    /// `key = value` configuration file applied over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact of the command.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Worker threads; 1 gives bit-exact, order-independent results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the fully resolved configuration and exit without side effects.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Ply,
    Xyz,
}

impl From<FormatArg> for CloudFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ply => CloudFormat::PlyAscii,
            FormatArg::Xyz => CloudFormat::Xyz,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write labeled synthetic scenes.
    GenData {
        /// Number of scenes (defaults to data.scenes).
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, value_enum, default_value = "ply")]
        format: FormatArg,
    },
    /// Dump multi-scale shape-context descriptors of a cloud.
    ShapeContext {
        /// Cloud file (.ply or .xyz).
        input: PathBuf,
        /// Use every n-th point as a center.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Pre-train on the configured synthetic scenes.
    Pretrain {
        /// Continue from `<out>/last.msp`.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps have completed.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Measure masked-shape recovery from subsampled masked points.
    ProbeLeakage,
    /// Linear probe of a pre-trained encoder against its initialization.
    ProbeLinear {
        /// Checkpoint path, or `last` for `<out>/last.msp`.
        #[arg(long, default_value = "last")]
        ckpt: String,
    },
    /// Side-by-side summary of probe and leakage reports.
    Compare {
        /// Report CSV files, optionally as `label=path`.
        #[arg(required = true)]
        reports: Vec<String>,
    },
    /// Gradient checks and reference-implementation suites.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("MSP_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(format!("MSP_LOG must be quiet, info or debug (got '{other}')")),
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr).init();
    Ok(())
}
