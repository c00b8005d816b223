use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use pphom_cli::{parse_config, run_command, Command};

/// Homogenization solvers for pseudo-parabolic systems with drift.
#[derive(Debug, Parser)]
#[command(name = "pphom", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

/// Worker threads for the parallel solvers; unset means one per core.
const THREADS_VAR: &str = "PPHOM_THREADS";

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring {THREADS_VAR}={v:?}"),
        }
    }
    let cfg = match parse_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out = cli.out.unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = run_command(cli.command, &cfg, &out);
    if !cli.quiet || outcome.code != 0 {
        print!("{}", outcome.summary);
    }
    ExitCode::from(outcome.code as u8)
}
