//! `agrolearn` command-line entry point.

mod commands;
mod policy;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agrolearn::noise::Condition;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AGROLEARN_OUT";

#[derive(Debug, Parser)]
#[command(name = "agrolearn", version, about = "Train and evaluate crop-management policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy per seed.
    Train(TrainArgs),
    /// Score a policy under one condition.
    Evaluate(EvaluateArgs),
    /// Compare two policies across perturbation conditions.
    Sweep(SweepArgs),
    /// Score reduction of a policy under each single-channel perturbation.
    Sensitivity(SensitivityArgs),
    /// Union state-space coverage of training runs.
    Coverage(CoverageArgs),
    /// Serve the surrogate environment over stdin/stdout.
    #[command(name = "protocol-serve")]
    ProtocolServe(ConfigArgs),
    /// Render tables from stored artifacts.
    Report(ReportArgs),
    /// Print or write the bundled default configs.
    Defaults(DefaultsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scenario, used when no config is given.
    #[arg(long, default_value = "florida")]
    pub scenario: String,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output root; defaults to $AGROLEARN_OUT or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Name of the run directory; defaults to `<verb>-<timestamp>`.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Serve episodes from an external process speaking the wire protocol,
    /// e.g. "python bridge.py --scenario florida". Split on whitespace.
    #[arg(long)]
    pub env_command: Option<String>,
    /// Per-request timeout for the external process, seconds.
    #[arg(long, default_value_t = 30.0)]
    pub env_timeout: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Overrides the configured episode budget.
    #[arg(long)]
    pub episodes: Option<u32>,
    /// Print a progress line every N episodes.
    #[arg(long)]
    pub progress: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Evaluation seeds; defaults to the config's seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 20)]
    pub episodes_per_seed: u32,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file, training seed directory, or "fixed".
    #[arg(long)]
    pub policy: String,
    #[arg(long, default_value = "clean")]
    pub condition: Condition,
    /// For a training seed directory: score every ensemble member and the
    /// final policy separately.
    #[arg(long)]
    pub members: bool,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint file, training seed directory, or "fixed".
    #[arg(long)]
    pub policy: String,
    /// Policy to compare against.
    #[arg(long, default_value = "fixed")]
    pub baseline: String,
    /// Column names for the two policies.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values = ["policy", "baseline"])]
    pub names: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "clean,temperature,rainfall,combined")]
    pub conditions: Vec<Condition>,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    /// Checkpoint file, training seed directory, or "fixed".
    #[arg(long)]
    pub policy: String,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Training run directories, each holding `seed_*` subdirectories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Display names, one per run; defaults to the directory names.
    #[arg(long, value_delimiter = ',')]
    pub names: Option<Vec<String>>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A directory written by any other verb.
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct DefaultsArgs {
    /// Write `florida.toml` and `zaragoza.toml` here instead of printing.
    #[arg(long)]
    pub write: Option<PathBuf>,
}

/// 3 for configuration problems, 1 for everything else that fails at run time.
fn exit_code(e: &agrolearn::Error) -> u8 {
    if e.category() == "config" {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                let first = e.to_string();
                let first = first.lines().next().unwrap_or("invalid arguments");
                eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            }
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
