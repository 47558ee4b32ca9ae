use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfom_lab::cli_io::{default_out_dir, parse_config, run_experiment};
use gfom_lab::harness::EXPERIMENT_KEYS;
use gfom_lab::programs::PROGRAM_KEYS;

/// Simulation and state-evolution laboratory for general first-order methods.
#[derive(Parser)]
#[command(name = "gfom-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config. Exit code 0 on pass, 1 on a tolerance failure.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default `runs/<experiment>-<config hash>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of replicates.
        #[arg(long)]
        replicates: Option<i64>,
        /// Write the config and manifest without computing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Parse and validate a config, printing it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    ListPrograms,
    ListExperiments,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, replicates, dry_run } => (|| {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| default_out_dir(&cfg));
            let (manifest, output) = run_experiment(&cfg, &dir, dry_run)?;
            println!("{}: {} ({})", cfg.experiment, manifest.status, dir.display());
            Ok(match output {
                Some(o) if !o.passed() => 1,
                _ => 0,
            })
        })(),
        Command::Validate { config } => parse_config(&config).map(|cfg| {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            0
        }),
        Command::ListPrograms => {
            for (k, d) in PROGRAM_KEYS {
                println!("{k:<16} {d}");
            }
            Ok(0)
        }
        Command::ListExperiments => {
            for (k, d) in EXPERIMENT_KEYS {
                println!("{k:<24} {d}");
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
