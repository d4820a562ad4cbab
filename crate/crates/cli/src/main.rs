//! `owd`: runs the synthetic open-world detection benchmark and exports its artifacts.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical
//! divergence, 3 I/O error.

mod artifacts;
mod project;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use owd_core::config::ExperimentConfig;
use owd_core::etf::build_simplex_etf;
use owd_core::experiment::{ablation_cells, run_cells, run_experiment, Sweep};

#[derive(Parser, Debug)]
#[command(
    name = "owd",
    version,
    about = "Energy-based open-world detection benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate every task of one configuration.
    Run(RunArgs),
    /// Run the EUS x EKD grid, or a margin / frame-size sweep.
    Ablate(AblateArgs),
    /// Frame utilities.
    Etf {
        #[command(subcommand)]
        command: EtfCommand,
    },
    /// Project feature rows onto their top two principal components.
    Project(ProjectArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// `m=0.25,0.5,1.0` or `k=32,64,128` instead of the EUS x EKD grid.
    #[arg(long)]
    sweep: Option<String>,
    /// Number of cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand, Debug)]
enum EtfCommand {
    /// Prints the largest Gram-matrix deviations of a frame as JSON.
    Check {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct ProjectArgs {
    /// CSV with a header row; numeric feature columns plus an optional `label` column.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (`x,y` plus `label` when the input had one); stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load_config(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    // The override only redirects files; the recorded config keeps its own
    // directory so that artifacts do not depend on where they were written.
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.common)?;
    let run = run_experiment(&cfg)?;
    artifacts::write_run(&out, &run)?;
    for t in &run.tasks {
        let r = &t.report;
        eprintln!(
            "task {}: known mAP {:.1}, U-Rec {:.1}, H {:.1}",
            r.task, r.known_map, r.u_recall, r.h_score
        );
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.common)?;
    let cells = match &args.sweep {
        Some(spec) => Sweep::parse(spec)?.cells(&cfg)?,
        None => ablation_cells(&cfg),
    };
    artifacts::ensure_dir(&out)?;
    let results = run_cells(&cells, args.parallel);
    let mut table = artifacts::ablation_writer(&out.join("ablation.csv"))?;
    let mut entries = Vec::with_capacity(cells.len());
    for (cell, result) in cells.iter().zip(results) {
        let run = result.with_context(|| format!("cell {}", cell.name))?;
        artifacts::write_run(&out.join(&cell.name), &run)?;
        artifacts::write_ablation_rows(&mut table, &cell.name, &run)?;
        entries.push(artifacts::CellEntry {
            name: cell.name.clone(),
            config_sha256: cell.config.digest(),
            seed: cell.config.seed,
            frame_seed: cell.config.frame_seed(),
        });
        eprintln!("cell {} done", cell.name);
    }
    table.flush()?;
    artifacts::write_grid_manifest(&out, &entries)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_etf_check(k: usize, d: usize, seed: u64) -> Result<()> {
    let frame = build_simplex_etf(k, d, seed)?;
    println!("{}", serde_json::to_string(&frame.gram_errors())?);
    Ok(())
}

/// Maps an error chain onto the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<owd_core::Error>() {
            return match e {
                owd_core::Error::Divergence(_) => 2,
                owd_core::Error::Io { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<project::InputError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { 3 } else { 1 };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Etf {
            command: EtfCommand::Check { k, d, seed },
        } => cmd_etf_check(*k, *d, *seed),
        Command::Project(args) => project::cmd_project(&args.input, args.output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
