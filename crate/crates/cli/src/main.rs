use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use srlab_cli::{Pipeline, RunConfig, Stage};

/// Runs the substitution experiment pipeline.
#[derive(Parser)]
#[command(name = "srlab", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Recompute even when the manifest says the stage is current.
    #[arg(long, global = true)]
    force: bool,
    /// Stage to run; with `all`, the last stage to run.
    #[arg(long, global = true, value_enum)]
    stage: Option<Stage>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenCorpus,
    TrainLm,
    DumpActs,
    TrainCoder,
    Explain,
    Score,
    Simulate,
    Calibrate,
    Evaluate,
    Report,
    /// Every stage in order, then the report.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenCorpus => Stage::GenCorpus,
            Command::TrainLm => Stage::TrainLm,
            Command::DumpActs => Stage::DumpActs,
            Command::TrainCoder => Stage::TrainCoder,
            Command::Explain => Stage::Explain,
            Command::Score => Stage::Score,
            Command::Simulate => Stage::Simulate,
            Command::Calibrate => Stage::Calibrate,
            Command::Evaluate => Stage::Evaluate,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let path = cli.config.context("--config is required")?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    let mut p = Pipeline::open(cfg)?;
    match (cli.command, cli.stage) {
        (Some(Command::All), last) => {
            for (stage, status) in p.run_all(last, cli.force)? {
                println!("{stage}: {status:?}");
            }
        }
        (Some(c), _) => {
            let stage = c.stage().expect("single stage");
            println!("{stage}: {:?}", p.run_stage(stage, cli.force)?);
        }
        (None, Some(stage)) => println!("{stage}: {:?}", p.run_stage(stage, cli.force)?),
        (None, None) => anyhow::bail!("name a subcommand or pass --stage"),
    }
    Ok(())
}
