use std::process::ExitCode;

use clap::Parser;

use boolattn_cli::{run, Cli, CliError, Outcome};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e @ (CliError::Usage(_) | CliError::Run(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
