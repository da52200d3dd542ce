use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ticketforge::pruning::PermuteMode;
use ticketforge_cli::{cmd_generate, cmd_permute, cmd_report, cmd_transfer, CliError, HarnessConfig, RunOptions};

#[derive(Parser)]
#[command(name = "ticketforge", version, about = "Generate, transfer and report pruned tickets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated replicate seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated conditions, e.g. `transferred,random_global`.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    /// `all`, `paper`, `none` or a list like `1,2,5`.
    #[arg(long)]
    eval_cadence: Option<String>,
}

impl RunArgs {
    fn split(self) -> Result<(HarnessConfig, RunOptions), CliError> {
        let cfg = HarnessConfig::load(&self.config)?;
        Ok((
            cfg,
            RunOptions {
                seeds: self.seeds,
                jobs: self.jobs.max(1),
                conditions: self.conditions,
                eval_cadence: self.eval_cadence,
            },
        ))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run iterative pruning and write one ticket per iteration.
    Generate(RunArgs),
    /// Train source tickets on the configured target against controls.
    Transfer(RunArgs),
    /// Write a ticket copy with its mask shuffled.
    Permute {
        #[arg(long)]
        ticket: PathBuf,
        #[arg(long, default_value = "global")]
        mode: PermuteMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild curves, plot data and layer ratio tables for a results directory.
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => {
            let (cfg, opts) = args.split()?;
            let s = cmd_generate(&cfg, &opts)?;
            println!(
                "{}: {} tickets written, {} runs done, {} skipped",
                s.dir.display(),
                s.tickets_written,
                s.runs_executed,
                s.runs_skipped
            );
        }
        Command::Transfer(args) => {
            let (cfg, opts) = args.split()?;
            let s = cmd_transfer(&cfg, &opts)?;
            println!(
                "{}: {} runs done, {} skipped, {} records",
                s.dir.display(),
                s.runs_executed,
                s.runs_skipped,
                s.records
            );
        }
        Command::Permute { ticket, mode, seed, out } => {
            let p = cmd_permute(&ticket, mode, seed, out.as_deref())?;
            println!("{}", p.display());
        }
        Command::Report { dir } => {
            let s = cmd_report(&dir)?;
            println!(
                "{}: {} records, {} curve points, {} ratio levels",
                dir.display(),
                s.records,
                s.curves,
                s.ratio_levels
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
