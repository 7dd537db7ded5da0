use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nsstab::cli::{run_subcommand, Subcommand};
use nsstab::config::parse_config;

/// Stabilization and null-control experiments for the Galerkin
/// Navier-Stokes model. All numeric parameters come from the config file.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// eigen | fit-c1 | constants | simulate | nullcontrol | stabilize | cost-curve | report
    command: String,
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = args
        .command
        .parse::<Subcommand>()
        .and_then(|cmd| run_subcommand(cmd, &parse_config(&args.config)?));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for a in &outcome.artifacts {
                log::info!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
