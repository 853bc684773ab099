use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rtspectra_cli::config::{assemble, Command};
use rtspectra_cli::{commands, exit, CliError};

/// Rayleigh-Taylor growth rates and verification runs on a MAC grid.
#[derive(Debug, Parser)]
#[command(name = "rtspectra", version)]
struct Cli {
    command: Command,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set params.mu=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $RTSPECTRA_OUT/<command>-<time>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn fail(e: &CliError) -> ExitCode {
    let rec = e.record();
    eprintln!("error: {e}");
    eprintln!("{}", serde_json::to_string(&rec).expect("record serializes"));
    ExitCode::from(rec.exit_code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    let text = match &cli.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => Some(t),
            Err(e) => return fail(&CliError::Usage(format!("{}: {e}", p.display()))),
        },
        None => None,
    };
    let cfg = match assemble(cli.command, text.as_deref(), &cli.set, cli.seed, cli.out) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let base = cli
        .config
        .as_ref()
        .and_then(|p| p.parent().map(PathBuf::from))
        .unwrap_or_default();
    match commands::execute(&cfg, &base) {
        Ok(code) => {
            eprintln!(
                "{}: {}",
                cfg.command.name(),
                if code == exit::PASS { "pass" } else { "certificate failure" }
            );
            ExitCode::from(code as u8)
        }
        Err(e) => fail(&e),
    }
}
