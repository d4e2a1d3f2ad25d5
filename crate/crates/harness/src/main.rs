use std::process::ExitCode;

use clap::Parser;
use irtrack_harness::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            if !cli.common.quiet {
                for f in files {
                    println!("{}", f.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("irtrack: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
