mod args;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, FileConfig};
use error::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_OUT_DIR: &str = "out";

/// Options shared by every command after layering flags over the config file.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Globals {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config_file: Option<PathBuf>,
}

fn load_config(path: &std::path::Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("config {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    let out_dir_set = cli.out_dir.is_some() || file.out_dir.is_some();
    let globals = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        out_dir: cli.out_dir.or(file.out_dir).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        config_file: cli.config,
    };
    match cli.command {
        Command::Prepare(a) => commands::prepare(&globals, a.over(file.prepare)),
        Command::BuildVocab(a) => commands::build_vocab(&globals, a.over(file.build_vocab)),
        Command::Train(a) => commands::train(&globals, a.over(file.train)),
        Command::Eval(a) => commands::eval(&globals, a.over(file.eval)),
        Command::Pipeline(a) => commands::pipeline(&globals, out_dir_set, a.over(file.pipeline)),
        Command::Chi2(a) => commands::chi2(&globals, a.over(file.chi2)),
        Command::Report(a) => commands::report(&globals, a.over(file.report)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
