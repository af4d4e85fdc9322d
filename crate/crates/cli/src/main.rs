//! `abwim`: train, evaluate, rank and inspect relation-detection models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use abwim::{AttentionMode, Preprocessing, Variant};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "abwim", version, about = "Knowledge-base relation detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every model command. Later sources win:
/// defaults (or the checkpoint), then `--config`, then `--set`, then the
/// dedicated flags.
#[derive(Args, Clone, Debug, Default)]
pub struct Shared {
    /// File of `key=value` configuration overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_keyword::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = parse_keyword::<Preprocessing>)]
    pub preprocess: Option<Preprocessing>,
    #[arg(long, value_parser = parse_keyword::<AttentionMode>)]
    pub attention: Option<AttentionMode>,
}

fn parse_keyword<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and a report.
    Train(commands::TrainArgs),
    /// Rank every instance of a dataset and report accuracy.
    Eval(commands::EvalArgs),
    /// Rank candidate relation chains for one question.
    Predict(commands::PredictArgs),
    /// Export the attention matrix of one question/relation pair as CSV.
    InspectAttention(commands::InspectArgs),
    /// Export the max-pooling positions of one question/relation pair as CSV.
    InspectMaxpool(commands::InspectArgs),
    /// Convert the released relation-detection files to the canonical format.
    Convert(commands::ConvertArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::InspectAttention(a) => commands::inspect_attention(a),
        Command::InspectMaxpool(a) => commands::inspect_maxpool(a),
        Command::Convert(a) => commands::convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
