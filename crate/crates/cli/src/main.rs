//! `hjbac`: train actor-critic HJB solvers, verify them by Monte Carlo and
//! run the wide-network studies.

mod args;
mod commands;
mod manifest;
mod study;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Outcome of a successful command invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok,
    Diverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, cli.threads),
        Command::Fit(a) => commands::fit(a, cli.threads),
        Command::VerifyMc(a) => commands::verify_mc(a, cli.threads),
        Command::Study(s) => study::run(&s.study, cli.threads),
        Command::Replay(a) => commands::replay(a, cli.threads),
        Command::Problems => commands::list_problems(),
    };
    match result {
        Ok(Exit::Ok) => ExitCode::SUCCESS,
        Ok(Exit::Diverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
