use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    bml_fbsde_cli::main_with(bml_fbsde_cli::Cli::parse())
}
