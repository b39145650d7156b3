use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(hyvit::cli::run(std::env::args_os()))
}
