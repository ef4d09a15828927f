use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use deltafix_cli::{
    cmd_ablate, cmd_build, cmd_evaluate, cmd_mine, cmd_predict, cmd_train, CliError, Overrides, PredictArgs, RunConfig,
    EXIT_OK, EXIT_USAGE,
};
use deltafix_core::change_builder::Variant;

/// Vulnerability-fixing commit detection from contextual code deltas.
#[derive(Debug, Parser)]
#[command(name = "deltafix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Context lines around each changed hunk.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Model variant, e.g. EmbedSubtract_Duo.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Work directory; replaces `workdir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mine commits from the configured repositories and attach labels.
    Mine(CommonOnly),
    /// Split, downsample and build contextual changes and the vocabulary.
    Build(CommonOnly),
    /// Train the configured variant.
    Train(CommonOnly),
    /// Score built changes with a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Built changes to score (defaults to the test partition).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compute F1, precision, recall, CostEffort@L and per-size F1.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train and evaluate every variant, or sweep the context size.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated context sizes, e.g. 0,1,3,5.
        #[arg(long, value_delimiter = ',')]
        sweep_k: Option<Vec<usize>>,
    },
}

#[derive(Debug, Args)]
struct CommonOnly {
    #[command(flatten)]
    common: Common,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}`; expected one of {}", names.join(", "))
    })
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let overrides = Overrides {
        seed: c.seed,
        k: c.k,
        variant: c.variant,
        out: c.out.clone(),
    };
    RunConfig::resolve(c.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Mine(c) => cmd_mine(&resolve(&c.common)?),
        Command::Build(c) => cmd_build(&resolve(&c.common)?),
        Command::Train(c) => cmd_train(&resolve(&c.common)?),
        Command::Predict {
            common,
            checkpoint,
            input,
        } => cmd_predict(&resolve(&common)?, &PredictArgs { checkpoint, input }),
        Command::Evaluate { common, predictions } => cmd_evaluate(&resolve(&common)?, predictions.as_deref()),
        Command::Ablate { common, sweep_k } => {
            if sweep_k.as_ref().is_some_and(|ks| ks.is_empty()) {
                return Err(CliError::Usage("--sweep-k needs at least one value".into()));
            }
            cmd_ablate(&resolve(&common)?, sweep_k.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
