use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cotlab::training::Variant;
use cotlab_cli::{ExperimentConfig, Lab, Suite};

#[derive(Parser)]
#[command(version, about = "CoT vs self-cascade speech translation lab")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the lexicon, corpus and contrastive set.
    Gen,
    /// Train one variant (or all) for one seed (or all).
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pause each run after this many steps; rerun to resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run evaluation suites on trained checkpoints.
    Eval {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        suite: Option<Suite>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate results across seeds into report/.
    Report,
    /// Print the effective config as TOML.
    Config,
}

fn run(cli: Cli) -> cotlab_cli::Result<()> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Command::Config = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let lab = Lab::new(config, cli.out)?;
    match cli.command {
        Command::Gen => lab.gen(),
        Command::Train { variant, seed, stop_after } => lab.train_limited(variant, seed, stop_after),
        Command::Eval { variant, suite, seed } => lab.eval(variant, suite, seed),
        Command::Report => {
            let path = lab.report()?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
