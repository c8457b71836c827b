//! Thin command-line layer over the core pipeline. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numerical failure.

mod args;
mod commands;

use std::ffi::OsString;

use clap::Parser;

use evfi_core::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Parse and dispatch; every outcome is an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // help/version are not usage errors
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            if code == EXIT_OK {
                print!("{err}");
            } else {
                eprint!("{err}");
            }
            return code;
        }
    };
    let result = match cli.command {
        args::Command::Simulate(a) => commands::simulate(a),
        args::Command::Voxelize(a) => commands::voxelize(a),
        args::Command::Train(a) => commands::train(a),
        args::Command::Interpolate(a) => commands::interpolate(a),
        args::Command::Eval(a) => commands::eval(a),
        args::Command::Gradcheck(a) => commands::gradcheck(a),
        args::Command::Selftest(a) => commands::selftest(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::Numerical { .. } | Error::Graph(_) => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}
