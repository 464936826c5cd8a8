use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use krr::cli::{self, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match cli::run(&cli, args) {
        Ok(summary) => {
            print!("{summary}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
