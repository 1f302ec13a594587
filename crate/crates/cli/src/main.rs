use std::process::ExitCode;

use clap::Parser;
use shapealign_cli::{run, Cli, Format};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if let Some(path) = &cli.out {
                if let Err(e) = std::fs::write(path, &outcome.json) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            match cli.format {
                Format::Json => print!("{}", outcome.json),
                Format::Table => print!("{}", outcome.table),
            }
            if outcome.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
