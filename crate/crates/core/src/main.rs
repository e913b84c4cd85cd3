use std::process::ExitCode;

fn main() -> ExitCode {
    attendout::cli::main_with(std::env::args_os())
}
