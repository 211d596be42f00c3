use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netmor::commands::{self, DEFAULT_BENCH_STEPS};
use netmor::{parse_config, CliError, RunManifest};

#[derive(Parser)]
#[command(name = "netmor", version, about = "Simulate and reduce gas, water and power network models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the full model and write trajectory.csv.
    Simulate(Common),
    /// Run tangential IRKA and write the reduced model and reports.
    Reduce(Common),
    /// Simulate full and reduced models side by side.
    Compare(Common),
    /// Time FVM and FDM step loops over a list of step sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, strictly descending step sizes.
        #[arg(long)]
        steps: Option<String>,
    },
}

fn run(cli: Cli) -> Result<RunManifest, CliError> {
    match cli.command {
        Command::Simulate(c) => commands::cmd_simulate(&parse_config(&c.config)?, &c.out),
        Command::Reduce(c) => commands::cmd_reduce(&parse_config(&c.config)?, &c.out),
        Command::Compare(c) => commands::cmd_compare(&parse_config(&c.config)?, &c.out),
        Command::Bench { common, steps } => {
            let steps = match steps {
                Some(s) => commands::parse_steps(&s)?,
                None => DEFAULT_BENCH_STEPS.to_vec(),
            };
            commands::cmd_bench(&parse_config(&common.config)?, &steps, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(manifest) => {
            for a in &manifest.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("netmor: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
