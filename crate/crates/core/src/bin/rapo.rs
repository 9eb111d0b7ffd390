use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rapo::acceptance::run_suite;
use rapo::harness::{format_summary_table, report};
use rapo::{run_experiment, Algorithm, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rapo", version, about = "RaPO and GRPO on synthetic class-incremental tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (algorithm, seed) pair and write per-run CSVs plus summary.csv.
    Run {
        /// TOML experiment config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Comma-separated algorithms: sft, grpo, rapo, grpo_v1, grpo_v2.
        #[arg(long, value_delimiter = ',', default_value = "sft,grpo,rapo,grpo_v1,grpo_v2")]
        algo: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue runs from their last completed task.
        #[arg(long)]
        resume: bool,
    },
    /// Re-aggregate record.json files under a run directory into summary.csv.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run an acceptance suite and print one line per criterion.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scratch directory for the persistence check.
        #[arg(long)]
        work: Option<PathBuf>,
    },
}

fn load(config: Option<PathBuf>) -> rapo::Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(&p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> rapo::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seeds,
            algo,
            out,
            resume,
        } => {
            let cfg = load(config)?;
            let algos = algo
                .iter()
                .map(|a| Algorithm::parse(a))
                .collect::<rapo::Result<Vec<_>>>()?;
            let exp = run_experiment(&cfg, &seeds, &algos, Some(&out), resume)?;
            print!("{}", format_summary_table(&exp.summary));
            Ok(true)
        }
        Command::Report { input } => {
            let rows = report(&input)?;
            print!("{}", format_summary_table(&rows));
            Ok(true)
        }
        Command::Verify {
            suite,
            config,
            work,
        } => {
            let cfg = load(config)?;
            let work = work.unwrap_or_else(|| {
                std::env::temp_dir().join(format!("rapo-verify-{}", std::process::id()))
            });
            let reports = run_suite(&suite, &cfg, &work)?;
            for r in &reports {
                println!("{}", r.line());
            }
            let passed = reports.iter().filter(|r| r.passed).count();
            println!("{passed}/{} criteria passed", reports.len());
            Ok(passed == reports.len())
        }
    }
}
