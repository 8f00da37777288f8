use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use coheragg::aggregates::{AggregateKind, AggregateSpec};
use coheragg::series::ColumnSpec;
use coheragg_cli::pipeline::{self, Query};
use coheragg_cli::synthetic::SyntheticSpec;
use coheragg_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "coheragg", version, about = "Coherent probabilistic forecasts over temporal aggregates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, forecast, reconcile and score an experiment.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` (and COHERAGG_OUTPUT_DIR).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Distribution of one linear aggregate under a stored consensus.
    Query {
        consensus: PathBuf,
        /// Aggregate kind (base, average, trend, halfdiff).
        #[arg(long, requires = "window")]
        kind: Option<AggregateKind>,
        #[arg(short = 'K', long = "K", default_value_t = 1)]
        k: usize,
        /// 0-based index of the aggregate window within the horizon.
        #[arg(long)]
        window: Option<usize>,
        /// Comma-separated dense weight vector of length R.
        #[arg(long, conflicts_with = "kind", value_delimiter = ',', allow_hyphen_values = true)]
        weights: Option<Vec<f64>>,
    },
    /// Score a run's stored distributions on arbitrary aggregates.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "y")]
        column: String,
        #[arg(long, value_delimiter = ',', default_value = "base,average,halfdiff")]
        kinds: Vec<AggregateKind>,
        #[arg(short = 'K', long = "K", value_delimiter = ',', default_value = "1")]
        windows: Vec<usize>,
        /// Where to write eval_*.{csv,json}; defaults to the run directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Summarize a stored consensus distribution.
    Inspect { consensus: PathBuf },
    /// Write the synthetic sinusoid + AR(1) dataset.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8000)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        phi: f64,
        #[arg(long)]
        period: Option<f64>,
        #[arg(long)]
        amplitude: Option<f64>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, output_dir, seed, workers } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let out = pipeline::cmd_run(cfg)?;
            print_json(&out.consensus_report)?;
        }
        Command::Query { consensus, kind, k, window, weights } => {
            let query = match (kind, weights) {
                (Some(kind), None) => Query::Spec {
                    spec: AggregateSpec::new(kind, k).map_err(CliError::from)?,
                    window: window.unwrap_or(0),
                },
                (None, Some(w)) => Query::Weights(w),
                _ => return Err(CliError::Config("pass either --kind/--window or --weights".into()).into()),
            };
            print_json(&pipeline::cmd_query(&consensus, &query)?)?;
        }
        Command::Eval { run_dir, truth, column, kinds, windows, output_dir } => {
            let specs: Vec<AggregateSpec> = kinds
                .iter()
                .flat_map(|&kind| windows.iter().filter_map(move |&k| AggregateSpec::new(kind, k).ok()))
                .collect();
            if specs.is_empty() {
                return Err(CliError::Config("no valid (kind, K) combination to evaluate".into()).into());
            }
            let out = pipeline::cmd_eval(&run_dir, &truth, &ColumnSpec::value(column), &specs)?;
            pipeline::write_eval(&out, output_dir.as_deref().unwrap_or(&run_dir))?;
            print_json(&out.consensus)?;
        }
        Command::Inspect { consensus } => print_json(&pipeline::cmd_inspect(&consensus)?)?,
        Command::Synth { output, seed, n, phi, period, amplitude } => {
            let mut spec = SyntheticSpec { n, phi, seed, ..Default::default() };
            if let Some(p) = period {
                spec.period = p;
            }
            if let Some(a) = amplitude {
                spec.amplitude = a;
            }
            let file = std::fs::File::create(&output)
                .map_err(|e| CliError::Io(format!("{}: {e}", output.display())))?;
            spec.write_csv(std::io::BufWriter::new(file))
                .with_context(|| format!("writing {}", output.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let cli_err = match err.downcast::<CliError>() {
                Ok(e) => e,
                Err(other) => CliError::Io(format!("{other:#}")),
            };
            eprintln!("{}", cli_err.to_json_line());
            ExitCode::from(cli_err.exit_code() as u8)
        }
    }
}
