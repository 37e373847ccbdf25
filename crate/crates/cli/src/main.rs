mod args;
mod coherence;
mod error;
mod eval;
mod inputs;
mod segment;
mod sweep;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, Extra};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROXYSEG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Segment(a) => args::resolve(&a.common, Extra::default()).and_then(|s| segment::run(&s)),
        Command::Eval(a) => args::resolve(
            &a.common,
            Extra {
                pred: a.pred,
                gt: a.gt,
                ..Extra::default()
            },
        )
        .and_then(|s| eval::run(&s)),
        Command::Coherence(a) => args::resolve(
            &a.common,
            Extra {
                gt: a.gt,
                sources: a.sources,
                ..Extra::default()
            },
        )
        .and_then(|s| coherence::run(&s)),
        Command::Sweep(a) => args::resolve(
            &a.common,
            Extra {
                gt: a.gt,
                param: a.param,
                values: a.values,
                ..Extra::default()
            },
        )
        .and_then(|s| sweep::run(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
