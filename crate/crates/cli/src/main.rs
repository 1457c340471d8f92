use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdmfc_cli::{check, presets, run_solve, CliError, LoadedConfig};

/// Mean-field control of reaction-diffusion systems.
#[derive(Debug, Parser)]
#[command(name = "rdmfc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the problem in a config file (or a preset name) and write CSV output.
    Solve {
        config: String,
        /// Override the configured iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check a config file (or a preset name) without solving.
    Validate { config: String },
    /// Inspect the shipped experiment presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Debug, Subcommand)]
enum PresetAction {
    /// List preset names with a one-line description.
    List,
    /// Print a preset's configuration.
    Show { name: String },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve {
            config,
            iters,
            output_dir,
        } => {
            let loaded = LoadedConfig::load(&config)?;
            let summary = run_solve(&loaded, iters, output_dir.as_deref())?;
            println!(
                "{} iterations, objective {:.6e}, primal residual {:.3e}",
                summary.iterations, summary.objective, summary.primal_residual
            );
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Validate { config } => {
            let loaded = LoadedConfig::load(&config)?;
            let (spec, grid) = loaded.build()?;
            check(&spec, &grid)?;
            println!("ok");
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                for p in presets::PRESETS {
                    println!("{:<18} {}", p.name, p.description());
                }
            }
            PresetAction::Show { name } => match presets::find(&name) {
                Some(p) => print!("{}", p.text),
                None => {
                    return Err(CliError::Config {
                        origin: name,
                        message: "no such preset".into(),
                    })
                }
            },
        },
    }
    Ok(())
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
