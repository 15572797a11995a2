//! Binary entry point; all logic lives in the library.

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fpedit::cli::run(std::env::args_os()))
}
