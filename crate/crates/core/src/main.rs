use std::process::ExitCode;

use clap::Parser;
use vqtlab::cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vqtlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
