use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod eval;
mod export;
mod gen;
mod oracle;
mod sample;
mod train;

#[derive(Parser, Debug)]
#[command(name = "so3mar", version, about = "Rotation diffusion with masked-autoregressive pose generation")]
struct Cli {
    /// Worker cap; every command currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write conditional and unconditional datasets plus the skeleton.
    GenData(gen::Args),
    /// Train a model; writes a checkpoint and a loss CSV.
    Train(train::Args),
    /// Draw pose hypotheses from a checkpoint.
    Sample(sample::Args),
    /// Score samples against ground truth for several Q.
    Eval(eval::Args),
    /// Run a numerical self-check.
    Oracle(oracle::Args),
    /// Flatten a dataset or sample file to per-joint CSV rows.
    Export(export::Args),
}

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<so3_mar::Error>() {
            if e.is_config() {
                return 2;
            }
        }
    }
    1
}

/// Prints the resolved settings of a run.
pub fn echo(command: &str, pairs: &[(&str, String)]) {
    println!("# command = {command}");
    for (k, v) in pairs {
        println!("# {k} = {v}");
    }
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| so3_mar::Error::io(path, e).into())
}

pub fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| so3_mar::Error::io(path, e).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let res = match cli.command {
        Command::GenData(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Sample(a) => sample::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Oracle(a) => oracle::run(a),
        Command::Export(a) => export::run(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
