use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diqkd_lab::{cmd_attack, cmd_session, cmd_sweep, cmd_threshold, parse_scenario, session_report, CliError};

#[derive(Parser)]
#[command(name = "diqkd-lab", version, about = "DIQKD architecture sweeps, thresholds, attacks and key sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Overrides the seed in the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Runs the scenario along its sweep axis and writes CSV.
    Sweep,
    /// Reports the critical detection efficiency.
    Threshold,
    /// Writes the post-selected CHSH value a local strategy can fake.
    Attack,
    /// Runs a full key session and writes its binary transcript.
    Session,
    /// Parses the scenario and prints it with all defaults filled in.
    Validate,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.scenario {
        Some(p) => parse_scenario(p)?,
        None => Default::default(),
    };
    let out = cli.out.clone().or_else(|| file.output.clone());
    match cli.command {
        Command::Sweep => write_out(out.as_deref(), &cmd_sweep(&file, cli.jobs)?),
        Command::Threshold => write_out(out.as_deref(), &cmd_threshold(&file)?),
        Command::Attack => write_out(out.as_deref(), &cmd_attack(&file.attack_etas)?),
        Command::Session => {
            let seed = cli.seed.unwrap_or(file.seed);
            let outcome = cmd_session(&file, seed, cli.jobs)?;
            let path = out.unwrap_or_else(|| PathBuf::from("transcript.bin"));
            std::fs::write(&path, outcome.transcript.to_bytes()).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            print!("{}", session_report(&outcome));
            println!("transcript={}", path.display());
            Ok(())
        }
        Command::Validate => {
            let json = serde_json::to_string_pretty(&file.to_json()).expect("value serializes");
            write_out(out.as_deref(), &format!("{json}\n"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
