use std::process::ExitCode;

fn main() -> ExitCode {
    partlayout_cli::cli::main_with(std::env::args_os())
}
