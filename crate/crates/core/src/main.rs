use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(concept_hierarchy::cli::cli(std::env::args()) as u8)
}
