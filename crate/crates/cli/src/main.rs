//! `lowshot <command> [--config file] [--key value ...]`

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lowshot::experiment::{cmd_compare, cmd_gem, cmd_run, cmd_saliency, cmd_synth, ConfigMap, ExperimentConfig, ExperimentError};

const SETTINGS_HELP: &str = "Settings are `key = value` lines read from --config <file>, then \
overridden by `--key value` flags (dotted keys such as --lowshot.tau 0.6). \
LSL_THREADS caps the number of worker threads.";

#[derive(Parser)]
#[command(name = "lowshot", version, about = "Two-step low-shot image classification experiments", after_help = SETTINGS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as PGM files plus manifest.csv.
    Synth(Settings),
    /// Train and evaluate one variant over the configured seeds.
    Run(Settings),
    /// Train and evaluate every configured variant and summarise over seeds.
    Compare(Settings),
    /// Write saliency maps for `--images a.pgm,b.pgm` under `--checkpoint`.
    Saliency(Settings),
    /// Write a GEM per predicted class of the held-out split (`--masked`, `--q`).
    Gem(Settings),
}

#[derive(clap::Args)]
struct Settings {
    /// `--config <file>` and `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
    args: Vec<String>,
}

fn threads() -> Result<Option<usize>, String> {
    match std::env::var("LSL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("LSL_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    let (settings, run): (Settings, fn(&ExperimentConfig) -> Result<(), ExperimentError>) = match command {
        Command::Synth(s) => (s, |c| cmd_synth(c).map(|m| println!("{}", m.display()))),
        Command::Run(s) => (s, |c| cmd_run(c).map(|r| print_rows(c, &r))),
        Command::Compare(s) => (s, |c| cmd_compare(c).map(|r| print_rows(c, &r))),
        Command::Saliency(s) => (s, |c| cmd_saliency(c).map(|w| println!("wrote {} saliency maps", w.len()))),
        Command::Gem(s) => (s, |c| cmd_gem(c).map(|w| println!("wrote {} maps", w.len()))),
    };
    let map = ConfigMap::from_args(&settings.args)?;
    let config = ExperimentConfig::from_map(&map)?;
    run(&config)
}

fn print_rows(config: &ExperimentConfig, summary: &lowshot::experiment::RunSummary) {
    for r in &summary.rows {
        println!("{:<20} seed {:<4} average {:.4}", r.variant.name(), r.seed, r.metrics.average);
    }
    println!("outputs in {}", config.out_dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match threads() {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: cannot size the thread pool: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
