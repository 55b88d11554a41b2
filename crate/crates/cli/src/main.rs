use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use farskip::{
    cmd_convert, cmd_distill, cmd_eval, cmd_generate, cmd_pretrain, cmd_simulate, cmd_simulate_scenario, cmd_sweep,
    override_checkpoint, CliError, Loaded,
};

#[derive(Parser)]
#[command(name = "farskip", version, about = "Rewired-connectivity MoE experiments and overlap simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Input checkpoint; overrides `io.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train each configured connectivity mode from scratch on one budget.
    Pretrain(Common),
    /// Convert a checkpoint and self-distill it against the original.
    Distill(WithCheckpoint),
    /// Rewire the masked layers of a checkpoint without training.
    Convert(WithCheckpoint),
    /// Proxy metrics, optionally with first-N / last-N conversion sensitivity.
    Eval(WithCheckpoint),
    /// Sample a continuation of the configured prompt.
    Generate(WithCheckpoint),
    /// Simulate a schedule scenario and report overlap.
    Simulate {
        /// Experiment config with a `[sim]` section.
        #[arg(long, short, conflicts_with = "scenario", required_unless_present = "scenario")]
        config: Option<PathBuf>,
        /// Scenario JSON to run directly.
        #[arg(long, requires = "out")]
        scenario: Option<PathBuf>,
        /// Output directory (required with --scenario).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Short runs over learning rates or batch sizes.
    Sweep(WithCheckpoint),
}

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json prints"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |w: WithCheckpoint| -> Result<(Loaded, Option<PathBuf>), CliError> {
        let mut l = Loaded::from_path(&w.common.config)?;
        override_checkpoint(&mut l, w.checkpoint);
        Ok((l, w.common.out))
    };
    match cli.command {
        Command::Pretrain(c) => print(&cmd_pretrain(&Loaded::from_path(&c.config)?, c.out.as_deref())?),
        Command::Distill(w) => {
            let (l, out) = load(w)?;
            print(&cmd_distill(&l, out.as_deref())?)
        }
        Command::Convert(w) => {
            let (l, out) = load(w)?;
            print(&cmd_convert(&l, out.as_deref())?)
        }
        Command::Eval(w) => {
            let (l, out) = load(w)?;
            print(&cmd_eval(&l, out.as_deref())?)
        }
        Command::Generate(w) => {
            let (l, out) = load(w)?;
            let summary = cmd_generate(&l, out.as_deref())?;
            println!("{}", summary["text"].as_str().unwrap_or_default());
        }
        Command::Sweep(w) => {
            let (l, out) = load(w)?;
            print(&cmd_sweep(&l, out.as_deref())?)
        }
        Command::Simulate { config, scenario, out } => {
            let (_, table) = match (config, scenario) {
                (Some(c), _) => cmd_simulate(&Loaded::from_path(&c)?, out.as_deref())?,
                (None, Some(s)) => {
                    let out = out.ok_or_else(|| CliError::Config("--scenario needs --out".into()))?;
                    cmd_simulate_scenario(&s, &out)?
                }
                (None, None) => return Err(CliError::Config("give --config or --scenario".into())),
            };
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("farskip: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
