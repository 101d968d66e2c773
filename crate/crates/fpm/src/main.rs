use std::process::ExitCode;

fn main() -> ExitCode {
    fpm::cli::run(std::env::args_os())
}
