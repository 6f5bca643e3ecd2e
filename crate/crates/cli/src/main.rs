//! `dynmoe`: drives the dynamic-MoE laboratory from a TOML run config.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "dynmoe", version, about = "Zero-expert dynamic MoE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set adapt.sft.steps=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic train and held-out corpora.
    GenData,
    /// Train the static teacher on the training corpus.
    TrainTeacher,
    /// Add extra experts to the teacher and report the output mismatch.
    Inject,
    /// Inject and run the configured distillation stages.
    Adapt,
    /// Score a checkpoint on the held-out corpus.
    Evaluate,
    /// Write the analytic speedup table.
    Flops,
    /// Record student rollouts and write the token-level tables.
    Analyze,
    /// Render SVG figures from the analysis tables.
    Plots,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Inject => "inject",
            Command::Adapt => "adapt",
            Command::Evaluate => "evaluate",
            Command::Flops => "flops",
            Command::Analyze => "analyze",
            Command::Plots => "plots",
            Command::ShowConfig => "show-config",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolved = config::resolve(cli.config.as_deref(), &cli.sets, cli.out.as_deref(), cli.seed)?;
    let c = &resolved.config;
    if let Command::ShowConfig = cli.command {
        print!("{}", config::to_toml(c)?);
        return Ok(());
    }
    let root = c.out_dir.clone();
    std::fs::create_dir_all(&root)?;
    let outcome = match cli.command {
        Command::GenData => commands::gen_data(c, &root)?,
        Command::TrainTeacher => commands::train_teacher(c, &root)?,
        Command::Inject => commands::inject_cmd(c, &root)?,
        Command::Adapt => commands::adapt(c, &root)?,
        Command::Evaluate => commands::evaluate(c, &root)?,
        Command::Flops => commands::flops_cmd(c, &root)?,
        Command::Analyze => commands::analyze(c, &root)?,
        Command::Plots => commands::plots(c, &root)?,
        Command::ShowConfig => unreachable!(),
    };
    let path = manifest::write(&root, cli.command.name(), &resolved.hash, c.seed, &outcome.inputs, &outcome.artifacts)?;
    for a in &outcome.artifacts {
        println!("{}", a.display());
    }
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dynmoe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
