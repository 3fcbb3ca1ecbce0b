use std::process::ExitCode;

use clap::Parser;

use yolic_cli::commands::{run, Cli, Command};
use yolic_cli::diag::ToolError;
use yolic_cli::service::{serve, AppState};
use yolic_cli::workspace::Workspace;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            for d in &e.details {
                eprintln!("  {d}");
            }
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<String, ToolError> {
    let ws = Workspace::open(&cli.workspace)?;
    match &cli.command {
        Command::Serve(a) => {
            let model = a.weights.as_deref().map(|p| ws.load_model(p)).transpose()?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| ToolError::io(e.to_string()))?;
            eprintln!("serving {} on http://{}", cli.workspace.display(), a.addr);
            rt.block_on(serve(AppState::new(ws, model), &a.addr))?;
            Ok(String::new())
        }
        other => run(&ws, other),
    }
}
