//! `dpct`: phantom generation, simulation, low-rank reconstruction, UBP
//! calibration and metrics from a JSON experiment configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpct::io::commands::{cmd_metrics, cmd_phantom, cmd_reconstruct, cmd_simulate, cmd_ubp};
use dpct::io::ExperimentConfig;
use dpct::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dpct", version, about = "Dynamic photoacoustic tomography with a low-rank spatiotemporal model")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write per-frame maximum-intensity projections.
    #[arg(long, global = true)]
    emit_mip: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the phantom, its TACs and its singular values.
    Phantom,
    /// Simulate the measurement sets of the study.
    Simulate,
    /// Reconstruct every measurement set of the study.
    Reconstruct,
    /// Speed-of-sound sweep with universal back-projection.
    Ubp,
    /// Compare an estimate with a ground truth.
    Metrics {
        /// Factored or dense image container.
        #[arg(long)]
        estimate: PathBuf,
        /// Dense image container.
        #[arg(long)]
        truth: PathBuf,
        /// TAC voxel as `i,j,k`; repeatable. Defaults to the configuration's TAC voxels.
        #[arg(long = "voxel", value_parser = parse_voxel)]
        voxels: Vec<[usize; 3]>,
    },
}

fn parse_voxel(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected i,j,k, got '{s}'"));
    }
    let mut v = [0usize; 3];
    for (slot, p) in v.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|e| format!("'{p}': {e}"))?;
    }
    Ok(v)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if cli.emit_mip {
        config.output.emit_mip = true;
    }
    if let Some(out) = &cli.output {
        config.output.directory = Some(out.clone());
    }
    Ok(config)
}

fn output_dir(cli: &Cli, config: Option<&ExperimentConfig>) -> PathBuf {
    cli.output
        .clone()
        .or_else(|| config.and_then(|c| c.output.directory.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn list(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Metrics { estimate, truth, voxels } => {
            let config = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            let voxels = match (voxels.is_empty(), &config) {
                (true, Some(c)) => c.tac_voxels()?,
                _ => voxels.clone(),
            };
            let dir = output_dir(cli, config.as_ref());
            print_json(&cmd_metrics(estimate, truth, &voxels, &dir)?)
        }
        command => {
            let config = load_config(cli)?;
            let dir = output_dir(cli, Some(&config));
            log::info!("writing to {}", dir.display());
            run_study(command, &config, &dir)
        }
    }
}

fn run_study(command: &Command, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    match command {
        Command::Phantom => list(&cmd_phantom(config, dir)?),
        Command::Simulate => list(&cmd_simulate(config, dir)?),
        Command::Reconstruct => print_json(&cmd_reconstruct(config, dir)?)?,
        Command::Ubp => print_json(&cmd_ubp(config, dir)?)?,
        Command::Metrics { .. } => unreachable!("handled by run"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
