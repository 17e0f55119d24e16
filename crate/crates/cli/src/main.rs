use std::process::ExitCode;

use clap::Parser;
use edgekd_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            } else {
                eprintln!("error ({}): {e}", e.kind());
            }
            ExitCode::from(e.exit_code())
        }
    }
}
