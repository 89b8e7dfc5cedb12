use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fscil_cli::config::{load_config, resolve_output, ReportConfig};
use fscil_cli::{cmd_inspect, cmd_report, cmd_search, cmd_train, exit, CliError, CliResult};
use fscil_cli::{ReportArgs, SearchArgs, TrainArgs};
use fscil_core::search::SelectMetric;

/// Joint-training benchmark for few-shot class-incremental learning.
///
/// Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
/// FSCIL_OUTPUT_ROOT, when set, is prepended to relative output paths.
#[derive(Parser)]
#[command(name = "fscil", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured strategy over every session.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: the config's output_dir).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue an interrupted run from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Desk-scale reduction of epochs and training data, in (0, 1].
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Random search over each technique of the [search] block, then compose
    /// the per-category winners into a config.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Skip trials that already have a record.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Selection metric: a_acc or g_acc.
        #[arg(long, value_parser = parse_metric)]
        metric: Option<SelectMetric>,
        #[arg(long)]
        scale: Option<f64>,
        /// Stop after this many new trials per technique (continue with --resume).
        #[arg(long)]
        max_trials: Option<usize>,
    },
    /// Session table and figures from finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Report directory (default: "report" under the output root).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Take the [report] block of this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also compute the CKA grid of the first run against each other run.
        #[arg(long)]
        cka: bool,
    },
    /// Print a run's or a search's metrics as text.
    Inspect { dir: PathBuf },
}

fn parse_metric(s: &str) -> Result<SelectMetric, String> {
    SelectMetric::parse(&s.to_ascii_lowercase().replace('-', "_")).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            output,
            resume,
            scale,
        } => {
            let (dir, record) = cmd_train(&TrainArgs {
                config,
                output,
                resume,
                scale,
            })?;
            for s in &record.sessions {
                println!(
                    "session {}: aAcc {:.2}%",
                    s.session_index,
                    100.0 * s.metrics.a_acc
                );
            }
            println!("run written to {}", dir.display());
        }
        Command::Search {
            config,
            output,
            resume,
            workers,
            metric,
            scale,
            max_trials,
        } => {
            let (dir, summary) = cmd_search(&SearchArgs {
                config,
                output,
                resume,
                workers,
                metric,
                scale,
                max_trials,
            })?;
            match summary {
                Some(s) => print!("{}", fscil_cli::commands::render_search_summary(&s)),
                None => println!("search incomplete; rerun with --resume"),
            }
            println!("search written to {}", dir.display());
        }
        Command::Report {
            runs,
            output,
            config,
            cka,
        } => {
            let mut report = match config {
                Some(p) => load_config(&p)?.report,
                None => ReportConfig::default(),
            };
            report.cka |= cka;
            let output = output.unwrap_or_else(|| resolve_output(std::path::Path::new("report")));
            let bundle = cmd_report(&ReportArgs {
                runs,
                output: output.clone(),
                report,
            })?;
            print!("{}", bundle.table.render_text());
            println!("report written to {}", output.display());
        }
        Command::Inspect { dir } => print!("{}", cmd_inspect(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(fscil_core::Error::Interrupted(_)) = &e {
                eprintln!("the run directory can be continued with --resume");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
