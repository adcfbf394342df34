use std::process::ExitCode;

fn main() -> ExitCode {
    coalescence_lab::cli::run()
}
