//! `evicast` command line: synthetic data generation and the staged
//! experiment pipeline (train / evaluate / backtest / report / run-all).
//!
//! Exit codes: 0 full success, 1 configuration error, 2 partial cell
//! failures (details in `manifest.json`).

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use evicast::data::SyntheticKind;
use evicast::experiment::{
    backtest_all, evaluate_all, report_all, run_and_write, train_all, ExperimentConfig,
    ReportFormat, RunManifest,
};
use evicast::loss::LossMethod;

#[derive(Parser)]
#[command(
    name = "evicast",
    version,
    about = "Evidential time-series forecasting: train a loss-function zoo, score calibration, backtest"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for all artifacts
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these methods (comma separated)
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Restrict to these symbols (comma separated)
    #[arg(long, value_delimiter = ',')]
    symbols: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic random-walk price CSV (`date,symbol,close`)
    Synth {
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Symbols to generate (comma separated)
        #[arg(long, value_delimiter = ',', default_value = "SYN")]
        symbols: Vec<String>,
        /// Days per symbol
        #[arg(long, default_value_t = 1500)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First date of the walk
        #[arg(long, default_value = "2020-01-01")]
        start: NaiveDate,
    },
    /// Train every (symbol, method) cell; writes checkpoints and histories
    Train(RunArgs),
    /// Predict the test split from saved checkpoints; writes prediction dumps
    Evaluate(RunArgs),
    /// Rebuild trade logs and trading tables from prediction dumps
    Backtest(RunArgs),
    /// Assemble report tables and the combined JSON from prediction dumps
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Formats to emit (csv, json)
        #[arg(long, value_delimiter = ',', default_value = "csv,json")]
        format: Vec<String>,
    },
    /// Full pipeline: train, evaluate, backtest and report in one pass
    RunAll(RunArgs),
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, evicast::Error> {
    let mut cfg = ExperimentConfig::from_json_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(methods) = &args.methods {
        cfg.methods = methods
            .iter()
            .map(|m| LossMethod::parse(m))
            .collect::<Result<_, _>>()?;
    }
    if let Some(symbols) = &args.symbols {
        cfg.symbols = Some(symbols.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_exit(manifest: &RunManifest) -> ExitCode {
    for cell in &manifest.cells {
        let status = if cell.ok { "ok" } else { "FAILED" };
        let detail = cell.error.as_deref().unwrap_or("");
        eprintln!(
            "[{status}] {} {} ({} ms) {detail}",
            cell.symbol,
            cell.method.name(),
            cell.wall_ms
        );
    }
    if manifest.n_failed > 0 {
        eprintln!("{} of {} cells failed", manifest.n_failed, manifest.cells.len());
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode, evicast::Error> {
    match cli.command {
        Command::Synth {
            out,
            symbols,
            days,
            seed,
            start,
        } => {
            evicast::experiment::write_synthetic_csv(
                SyntheticKind::RandomWalkPrices,
                &symbols,
                days,
                seed,
                start,
                &out,
            )?;
            eprintln!("wrote {} symbols x {days} days to {}", symbols.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let manifest = train_all(&cfg, &args.out)?;
            Ok(manifest_exit(&manifest))
        }
        Command::Evaluate(args) => {
            let cfg = load_config(&args)?;
            let manifest = evaluate_all(&cfg, &args.out)?;
            Ok(manifest_exit(&manifest))
        }
        Command::Backtest(args) => {
            let cfg = load_config(&args)?;
            backtest_all(&cfg, &args.out)?;
            eprintln!("trade logs and trading tables written to {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { run, format } => {
            let cfg = load_config(&run)?;
            let formats: Vec<ReportFormat> = format
                .iter()
                .map(|f| ReportFormat::parse(f))
                .collect::<Result<_, _>>()?;
            report_all(&cfg, &run.out, &formats)?;
            eprintln!("reports written to {}", run.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::RunAll(args) => {
            let cfg = load_config(&args)?;
            let out = run_and_write(&cfg, &args.out)?;
            Ok(manifest_exit(&out.manifest))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
