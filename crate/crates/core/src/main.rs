use std::process::ExitCode;

fn main() -> ExitCode {
    pfnn::cli::run(std::env::args_os())
}
