use std::process::ExitCode;

fn main() -> ExitCode {
    grounded::cli::run_args(std::env::args_os())
}
