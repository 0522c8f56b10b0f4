use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use comet_core::suite::{comparison_table, dump_datasets, parse_config, run_suite};

#[derive(Parser)]
#[command(
    name = "comet",
    version,
    about = "Continual universal test-time adaptation on synthetic streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, scenario, seed) combination of a suite config.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Write the generated source and target data of each scenario as CSV.
    Dump {
        config: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            jobs,
        } => parse_config(&config).and_then(|mut suite| {
            if let Some(s) = seeds {
                suite.seeds = s;
            }
            let res = run_suite(&suite, &out, jobs.max(1))?;
            print!("{}", comparison_table(&suite, &res.rows));
            eprintln!(
                "{} runs, {} failed; results in {}",
                res.rows.len(),
                res.failures(),
                out.display()
            );
            Ok(res.failures() == 0)
        }),
        Command::Dump { config, out, seeds } => parse_config(&config).and_then(|mut suite| {
            if let Some(s) = seeds {
                suite.seeds = s;
            }
            for p in dump_datasets(&suite, &out)? {
                println!("{}", p.display());
            }
            Ok(true)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
