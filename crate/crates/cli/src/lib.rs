//! Command-line front end: `train`, `evaluate`, `forecast`, `ablate`,
//! `bench`, `sweep` and `synth`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 divergence or other numerical failure.

pub mod args;
pub mod commands;
pub mod error;
pub mod run;

pub use error::{CliError, CliResult, ExitKind};

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
