use std::process::ExitCode;

fn main() -> ExitCode {
    mddm_core::cli::run_with_args(std::env::args_os())
}
