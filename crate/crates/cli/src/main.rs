use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eqdisc_cli::commands;
use eqdisc_cli::config::RunConfig;
use eqdisc_cli::exit_code;

#[derive(Parser)]
#[command(name = "eqdisc", version, about = "Equation discovery with ensemble uncertainty")]
struct Cli {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// One evolutionary search per variable.
    Discover,
    /// Repeated searches pooled into a term table.
    Ensemble,
    /// Learn the Bayesian network over the term table.
    Bnet,
    /// Sample systems from the network and integrate them.
    SampleSolve,
    /// Fixed-library bootstrap baseline.
    Baseline,
    /// Coefficient errors against the reference system.
    Compare,
}

fn configure(cli: &Cli) -> eqdisc::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.set("run.output_dir", &o.display().to_string())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure(&cli).and_then(|cfg| match cli.command {
        Command::Discover => commands::discover(&cfg),
        Command::Ensemble => commands::ensemble(&cfg),
        Command::Bnet => commands::bnet(&cfg),
        Command::SampleSolve => commands::sample_solve(&cfg),
        Command::Baseline => commands::baseline(&cfg),
        Command::Compare => commands::compare(&cfg),
    });
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
