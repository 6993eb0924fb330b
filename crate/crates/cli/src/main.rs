//! `ising-hs`: generate models, estimate log Z, sample, and compare the
//! pipeline against exact enumeration.
//!
//! Exit codes: 0 success, 1 oracle comparison outside tolerance, 2 usage or
//! invalid input, 3 I/O, 4 parse, 5 capacity, 6 numeric, 7 estimator or
//! sampler failure, 8 consistency.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use ising_hs::IsingError;

use args::{Cli, Command};

fn exit_code(err: &IsingError) -> u8 {
    match err {
        IsingError::InvalidInput(_) => 2,
        IsingError::Io { .. } => 3,
        IsingError::Parse { .. } => 4,
        IsingError::Capacity { .. } => 5,
        IsingError::Numeric(_) => 6,
        IsingError::Estimator(_) | IsingError::SamplerFailure { .. } => 7,
        IsingError::Consistency(_) => 8,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(0) as usize;
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Sample(a) => commands::sample(a),
        Command::OracleCompare(a) => commands::oracle_compare(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
