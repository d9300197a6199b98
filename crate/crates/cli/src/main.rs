use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use epochreg::io::{read_json, write_json};
use epochreg::pipeline::{write_synthetic_workspace, Pipeline, PipelineConfig};
use epochreg::precise_match::MatchMode;
use epochreg::synthetic::{generate_scene, SceneSpec};
use serde::Serialize;

/// Multi-epoch aerial block georeferencing.
#[derive(Debug, Parser)]
#[command(name = "epochreg", version)]
struct Cli {
    /// Workspace directory; every configured path is relative to it.
    #[arg(long, short = 'w', default_value = ".", global = true)]
    workspace: PathBuf,
    /// Pipeline configuration (JSON), relative to the workspace.
    #[arg(long, short = 'c', default_value = "config.json", global = true)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Patch,
    Guided,
}

impl From<Mode> for MatchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Patch => MatchMode::Patch,
            Mode::Guided => MatchMode::Guided,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic multi-epoch scene and a matching configuration.
    Synth {
        /// Scene specification (JSON) relative to the workspace; defaults
        /// to the built-in two-epoch scene.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Rough DSM-based co-registration of every free epoch.
    Coreg,
    /// Inter-epoch matching of overlapping image pairs.
    Match {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// 3D-RANSAC and cross-correlation filtering of the tentative matches.
    Filter,
    /// Combined bundle adjustment with self-calibration.
    Ba,
    /// Differences of DSMs against the reference epoch.
    Dod,
    /// Check-point accuracy before and after adjustment.
    Checkpt,
    /// Orthophoto displacement maps against the reference epoch.
    Displace,
    /// Every stage in order.
    Run {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open(cli: &Cli, mode: Option<Mode>) -> anyhow::Result<Pipeline> {
    let path = cli.workspace.join(&cli.config);
    let mut config: PipelineConfig =
        read_json(&path).with_context(|| format!("reading configuration {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = mode {
        config.precise.mode = mode.into();
    }
    Ok(Pipeline::new(&cli.workspace, config)?)
}

fn synth(cli: &Cli, spec: Option<&Path>) -> anyhow::Result<()> {
    let spec: SceneSpec = match spec {
        Some(p) => read_json(&cli.workspace.join(p)).with_context(|| format!("reading scene spec {}", p.display()))?,
        None => SceneSpec::default(),
    };
    let scene = generate_scene(&spec)?;
    let config_name = cli.config.to_string_lossy();
    let mut config = write_synthetic_workspace(&cli.workspace, &scene, &config_name)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        write_json(&cli.workspace.join(&cli.config), &config)?;
    }
    log::info!("wrote {} epochs to {}", scene.epochs.len(), cli.workspace.display());
    print_json(&scene.truth())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth { spec } => synth(cli, spec.as_deref()),
        Command::Coreg => print_json(&open(cli, None)?.stage_coreg()?),
        Command::Match { mode } => print_json(&open(cli, *mode)?.stage_match()?),
        Command::Filter => print_json(&open(cli, None)?.stage_filter()?),
        Command::Ba => print_json(&open(cli, None)?.stage_ba()?),
        Command::Dod => print_json(&open(cli, None)?.stage_dod()?),
        Command::Checkpt => print_json(&open(cli, None)?.stage_checkpoints()?),
        Command::Displace => print_json(&open(cli, None)?.stage_displacement()?),
        Command::Run { mode } => print_json(&open(cli, *mode)?.run()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
