use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = co2_cli::Cli::parse();
    let stdout = std::io::stdout();
    match co2_cli::run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
