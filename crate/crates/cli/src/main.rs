//! `stcmtl` command-line runner: simulate benchmark data, train models and
//! evaluate them.

mod evaluate;
mod simulate;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::debug;
use stcmtl::{Error, Exec};

const THREADS_VAR: &str = "STCMTL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "stcmtl", version, about = "Semisoft task clustering for multi-task learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model on the tasks listed in a manifest
    Train(train::TrainArgs),
    /// Generate a synthetic benchmark dataset with its ground truth
    Simulate(simulate::SimulateArgs),
    /// Score a fitted model on a test manifest
    Evaluate(evaluate::EvaluateArgs),
}

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input data, arguments or files (exit 2).
    Data(String),
    /// The numerics broke down (exit 3).
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string().replace('\n', " ");
        if e.is_numeric() {
            Failure::Numeric(msg)
        } else {
            Failure::Data(msg)
        }
    }
}

/// Reads the thread cap and configures the global pool. One thread (or a
/// build without the `parallel` feature) runs everything sequentially.
fn configure_threads() -> Result<Exec, Failure> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(Exec::default());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Data(format!("{THREADS_VAR}={raw:?} is not a positive integer")))?;
    debug!("{THREADS_VAR}={n}");
    if n == 1 {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Data(format!("cannot start {n} threads: {e}")))?;
    Ok(Exec::default())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = configure_threads()?;
    match cli.command {
        Command::Train(args) => train::run(args, exec),
        Command::Simulate(args) => simulate::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let head: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
            eprintln!("error: {}", head.join(" ").trim_start_matches("error:").trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
