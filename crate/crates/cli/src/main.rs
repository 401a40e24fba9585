use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(settlemap_cli::run(std::env::args_os()) as u8)
}
