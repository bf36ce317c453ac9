//! Command-line front end: synthetic cohorts, fitting, evaluation,
//! identifiability checks, linear baselines and the recovery protocol.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::{CheckFailed, Cli};

/// Exit codes: 0 success, 1 domain error, 2 usage error, 3 I/O error.
fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<multirate::Error>() {
            let code = match e.category() {
                multirate::error::ErrorCategory::Io => 3,
                multirate::error::ErrorCategory::Domain => 1,
            };
            return (code, e.tag());
        }
        if cause.downcast_ref::<CheckFailed>().is_some() {
            return (1, "check");
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (3, "io");
        }
    }
    (1, "domain")
}

/// The error and its causes on one line, skipping causes whose text the
/// previous message already contains.
fn one_line(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, tag) = exit_code(&err);
            let msg = one_line(&err);
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
