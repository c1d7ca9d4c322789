use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::init();
    ExitCode::from(spsa_lab::cli::run(std::env::args_os()))
}
