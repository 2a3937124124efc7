//! `brivl`: data generation, pre-training, evaluation and imagination from
//! the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "brivl", version, about = "Two-tower image/text contrastive pre-training at desk scale")]
pub struct Cli {
    /// Only report errors.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Report per-step progress.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus `key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic image/caption dataset.
    Datagen {
        #[arg(long)]
        seed: u64,
        /// Number of training pairs.
        #[arg(long)]
        size: usize,
        /// Number of held-out pairs (default: a tenth of --size).
        #[arg(long)]
        test: Option<usize>,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train both towers; writes a checkpoint per epoch and a metrics log.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `checkpoint.ckpt` and `metrics.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Directory for report files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Query text for `neighbors`.
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Synthesize an image for a text with a frozen model.
    Imagine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value_t = Mode::Visualize)]
        mode: Mode,
        /// Generator checkpoint (required for `generate`).
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Also maximize this channel of the last backbone layer.
        #[arg(long)]
        neuron: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output PPM; the cosine trace goes next to it as `<out>.trace.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codebook generator used by `imagine --mode generate`.
    TrainGenerator {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive, block and tower.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print every key's default with its description.
        #[arg(long)]
        print_defaults: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Retrieval,
    Zeroshot,
    Neighbors,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Visualize,
    Generate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_repeat() {
        let cli = Cli::try_parse_from(["brivl", "config", "--set", "lr=0.01", "--set", "epochs=3"]).unwrap();
        let Command::Config { config, .. } = cli.command else { panic!("wrong subcommand") };
        assert_eq!(config.overrides, ["lr=0.01", "epochs=3"]);
    }
}
