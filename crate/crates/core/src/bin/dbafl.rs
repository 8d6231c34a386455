use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dbafl::chain::AuditOutcome;
use dbafl::cli::{self, AttackOverride, RunManifest};
use dbafl::orchestrator::Strategy;

#[derive(Parser)]
#[command(
    name = "dbafl",
    version,
    about = "Simulate blockchain-backed asynchronous federated learning"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics and chain dumps.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// May be repeated.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// dbafl, bsfl, fedavg, afl, local or static:<eps>.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// poisoning or ddos:<fraction>.
        #[arg(long)]
        attack: Option<AttackOverride>,
        /// Accuracy threshold fraction for discarding local models.
        #[arg(long)]
        defense: Option<f64>,
    },
    /// Verify every block of a chain dump.
    Audit {
        #[arg(long)]
        chain: PathBuf,
    },
    /// Run every strategy over a seed range.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategies.
        #[arg(long)]
        strategies: String,
        /// e.g. 0..5, 0..=4 or 1,2,3.
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let status = match execute(args.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(status as u8)
}

fn execute(command: Command) -> dbafl::Result<i32> {
    match command {
        Command::Run {
            config,
            out,
            seeds,
            strategy,
            attack,
            defense,
        } => {
            let manifest = RunManifest {
                seeds,
                strategies: strategy.into_iter().collect(),
                attack,
                defense,
                ..RunManifest::new(config, out)
            };
            report(&cli::run(&manifest)?);
            Ok(cli::EXIT_OK)
        }
        Command::Audit { chain } => match cli::audit_chain(&chain)? {
            AuditOutcome::Ok => {
                println!("ok");
                Ok(cli::EXIT_OK)
            }
            AuditOutcome::FirstBadBlock(i) => {
                println!("first bad block: {i}");
                Ok(cli::EXIT_AUDIT)
            }
        },
        Command::Sweep {
            config,
            strategies,
            seeds,
            out,
        } => {
            let manifest = RunManifest {
                seeds: cli::parse_seeds(&seeds)?,
                strategies: cli::parse_strategies(&strategies)?,
                ..RunManifest::new(config, out)
            };
            report(&cli::run(&manifest)?);
            Ok(cli::EXIT_OK)
        }
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}
