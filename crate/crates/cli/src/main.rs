use std::path::PathBuf;
use std::process::ExitCode;

use aqpl_cli::commands::{cmd_compare, cmd_run, cmd_serve, cmd_theory, HumanFlags};
use aqpl_cli::config::Overrides;
use aqpl_cli::theory::{SigmaGrid, TheoryOptions};
use clap::{Args, Parser, Subcommand};

/// Noise-robust training with per-example perturbation levels queried from
/// an oracle.
#[derive(Parser)]
#[command(name = "aqpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, run the query rounds and write metrics, query logs,
    /// checkpoints and a summary.
    Run(ExperimentArgs),
    /// Run all four strategies on paired seeds and write curves.csv.
    Compare(ExperimentArgs),
    /// Check how entropy relates to the noise level and the optimal level.
    Theory {
        /// Noise levels for the monotonicity check, as start:stop:step.
        #[arg(long, default_value = "0.05:3.0:0.05")]
        sigma_grid: SigmaGrid,
        /// Also report the case where model and oracle differ.
        #[arg(long)]
        misaligned: bool,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Start the annotation service and train with a human oracle.
    Serve(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Output directory (overrides the file and AQPL_OUTPUT_DIR).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated strategies: aqpl, random, clean-uncertainty, noise-uncertainty.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Number of query rounds.
    #[arg(long)]
    rounds: Option<u32>,
    /// Answer queries through the annotation service.
    #[arg(long)]
    human_oracle: bool,
    /// Address of the annotation service, e.g. 127.0.0.1:8080.
    #[arg(long)]
    serve_addr: Option<String>,
    /// How long a round waits for annotations.
    #[arg(long)]
    oracle_timeout_secs: Option<u64>,
}

impl ExperimentArgs {
    fn split(&self) -> (Overrides, HumanFlags) {
        (
            Overrides {
                output_dir: self.output_dir.clone(),
                seeds: self.seeds.clone(),
                strategies: self.strategies.clone(),
                rounds: self.rounds,
            },
            HumanFlags {
                enabled: self.human_oracle,
                serve_addr: self.serve_addr.clone(),
                timeout_secs: self.oracle_timeout_secs,
            },
        )
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Run(args) => {
            let (o, h) = args.split();
            cmd_run(&args.config, &o, &h)
        }
        Command::Compare(args) => {
            let (o, h) = args.split();
            cmd_compare(&args.config, &o, &h)
        }
        Command::Serve(args) => {
            let (o, h) = args.split();
            cmd_serve(&args.config, &o, &h)
        }
        Command::Theory {
            sigma_grid,
            misaligned,
            seed,
        } => cmd_theory(&TheoryOptions {
            grid: sigma_grid,
            misaligned,
            seed,
        }),
    };
    ExitCode::from(code)
}
