//! Experiment harness for the emulated one-sided sparse multiply library.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error,
//! 3 verification failure, 4 resource exhaustion.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use commands::{cmd_gen, cmd_imbalance, cmd_model, cmd_run, GenArgs, ImbalanceArgs, ModelArgs, RunArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("resource exhausted: {0}")]
    Resource(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Resource(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rdma-spmm", version, about = "Distributed sparse multiply experiments on an emulated RDMA fabric")]
struct Cli {
    /// Report directory.
    #[arg(long, global = true, env = "RDMA_SPMM_OUT_DIR", default_value = "rdma-spmm-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one distributed multiply and write reports.
    Run(RunArgs),
    /// Evaluate the communication and roofline model for a problem shape.
    Model(ModelArgs),
    /// Nonzero and flop load imbalance of a matrix on a square grid.
    Imbalance(ImbalanceArgs),
    /// Generate a matrix and write it in Matrix Market format.
    Gen(GenArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, &cli.out_dir),
        Command::Model(a) => cmd_model(a),
        Command::Imbalance(a) => cmd_imbalance(a, &cli.out_dir),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).code(), 2);
        assert_eq!(CliError::Verify(String::new()).code(), 3);
        assert_eq!(CliError::Resource(String::new()).code(), 4);
        assert_eq!(CliError::Other(anyhow::anyhow!("x")).code(), 1);
    }
}
