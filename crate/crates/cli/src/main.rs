mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::Cli;

const EXIT_RUNTIME: u8 = 1;
const EXIT_DEGENERATE: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_MALFORMED: u8 = 65;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    match e.chain().find_map(|c| c.downcast_ref::<cinetraj::Error>()) {
        Some(err @ cinetraj::Error::Format { .. }) => (EXIT_MALFORMED, err.kind()),
        Some(err @ cinetraj::Error::DegenerateOverlap { .. }) => (EXIT_DEGENERATE, err.kind()),
        Some(err) => (EXIT_RUNTIME, err.kind()),
        None => (EXIT_RUNTIME, "runtime"),
    }
}
