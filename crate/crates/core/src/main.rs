use std::io;
use std::process::ExitCode;

use clap::Parser;

use scanbench::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli, &mut io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scanbench: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
