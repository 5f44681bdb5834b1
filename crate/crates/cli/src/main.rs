use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use qexplain_cli::commands::{run, Cli, Command};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    // explanation JSON owns stdout, so its summary goes to stderr
    let summary_to_stderr = matches!(cli.command, Command::Explain(_));
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(summary) => {
            if summary_to_stderr {
                eprintln!("{summary}");
            } else {
                let _ = writeln!(stdout, "{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
