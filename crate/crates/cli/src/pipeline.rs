//! End-to-end experiment: ingest, fit one forecaster per level, forecast
//! every rolling window of the evaluation segment, reconcile, score and
//! write artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use coheragg::aggregates::{pad_weight, AggregateKind, AggregateSpec, PaddedWeight};
use coheragg::consensus::{reconcile, ConsensusDistribution, LevelForecast, QueryResult};
use coheragg::evaluation::{evaluate_baseline, evaluate_consensus, plot_csv, plot_svg, ScoreReport};
use coheragg::forecasters::{read_forecasts_csv, write_forecasts_csv, GaussianForecast, LevelModel, LevelSetup};
use coheragg::series::{ingest_csv, rolling_windows, split, ColumnSpec, TimeSeries};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Segment};
use crate::error::CliError;

/// Everything produced for one rolling window.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub origin: usize,
    pub forecasts: Vec<GaussianForecast>,
    pub consensus: ConsensusDistribution,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub models: Vec<LevelModel>,
    pub windows: Vec<WindowResult>,
    pub consensus_report: ScoreReport,
    pub baseline_report: Option<ScoreReport>,
    pub unconverged: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Write via a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Run the experiment in memory without touching the output directory.
pub fn execute(mut config: ExperimentConfig) -> Result<RunOutput, CliError> {
    config.resolve();
    config.validate()?;

    let (series, report) = ingest_csv(&config.dataset.path, &config.dataset.columns)
        .map_err(|e| CliError::Data(e.to_string()))?;
    log::info!(
        "ingested {} rows ({} rejected, {} filled)",
        report.rows,
        report.rejected,
        report.filled
    );
    let n = series.len();
    let segments = split(n, &config.split).map_err(|e| CliError::Config(e.to_string()))?;
    let t = config.split.history;
    let r = config.split.horizon;

    let train = series.slice(segments.train.clone());
    let setups: Vec<LevelSetup> = config
        .levels
        .iter()
        .map(|l| LevelSetup {
            spec: l.aggregate.clone(),
            config: l.forecaster,
        })
        .collect();
    let models = coheragg::forecasters::fit_levels(&train, &setups, r)?;

    let segment = match config.segment {
        Segment::Val => segments.val.clone(),
        Segment::Test => segments.test.clone(),
    };
    let stride = config.stride.unwrap_or(r);
    let windows = rolling_windows(segment.len(), t, r, stride).map_err(|e| CliError::Data(e.to_string()))?;
    let origins: Vec<usize> = windows.iter().map(|w| segment.start + w.target.start).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<Result<WindowResult, CliError>> = pool.install(|| {
        origins
            .par_iter()
            .map(|&origin| forecast_window(&config, &models, &series, origin))
            .collect()
    });
    let windows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let unconverged = windows.iter().filter(|w| !w.consensus.diagnostics().converged).count();

    let specs = config.eval.specs();
    let pairs: Vec<(&ConsensusDistribution, &[f64])> =
        windows.iter().map(|w| (&w.consensus, w.truth.as_slice())).collect();
    let consensus_report = evaluate_consensus(&pairs, &specs)?;

    let base_level = config
        .levels
        .iter()
        .position(|l| l.aggregate.kind() == AggregateKind::Base);
    let baseline_report = match base_level {
        Some(i) => {
            let pairs: Vec<(&GaussianForecast, &[f64])> =
                windows.iter().map(|w| (&w.forecasts[i], w.truth.as_slice())).collect();
            Some(evaluate_baseline(&pairs, &specs)?)
        }
        None => {
            log::warn!("no base level configured; skipping the independent baseline");
            None
        }
    };

    Ok(RunOutput {
        config,
        models,
        windows,
        consensus_report,
        baseline_report,
        unconverged,
    })
}

fn forecast_window(
    config: &ExperimentConfig,
    models: &[LevelModel],
    series: &TimeSeries,
    origin: usize,
) -> Result<WindowResult, CliError> {
    let t = config.split.history;
    let r = config.split.horizon;
    let past = &series.values()[..origin];
    let forecasts = models
        .iter()
        .map(|m| m.forecast(past, t, r))
        .collect::<Result<Vec<_>, _>>()?;
    let levels: Vec<LevelForecast<'_>> = config
        .levels
        .iter()
        .zip(&forecasts)
        .map(|(l, f)| LevelForecast {
            spec: &l.aggregate,
            forecast: f,
            alpha: l.alpha.unwrap_or_else(|| config.alpha.for_kind(l.aggregate.kind())),
        })
        .collect();
    let mut consensus = reconcile(&levels, r, &config.consensus)?;
    consensus.origin = Some(origin);
    Ok(WindowResult {
        origin,
        forecasts,
        consensus,
        truth: series.values()[origin..origin + r].to_vec(),
    })
}

#[derive(Serialize)]
struct RunSummary<'a> {
    windows: usize,
    origins: Vec<usize>,
    unconverged: usize,
    max_grad_norm: f64,
    max_iterations: usize,
    eval_specs: Vec<&'a str>,
}

fn report_bytes(report: &ScoreReport) -> Result<(Vec<u8>, Vec<u8>), CliError> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    Ok((csv, to_json(report)?))
}

/// Write every artifact of a run under `dir`.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    write_atomic(&dir.join("config.resolved.json"), &to_json(&out.config)?)?;
    write_atomic(&dir.join("models.json"), &to_json(&out.models)?)?;

    for (i, w) in out.windows.iter().enumerate() {
        let stem = format!("window_{i:03}");
        let mut buf = Vec::new();
        write_forecasts_csv(&mut buf, &w.forecasts)?;
        write_atomic(&dir.join("forecasts").join(format!("{stem}.csv")), &buf)?;
        write_atomic(&dir.join("consensus").join(format!("{stem}.json")), &to_json(&w.consensus)?)?;
        write_atomic(
            &dir.join("plots").join(format!("{stem}.csv")),
            plot_csv(&w.consensus, &w.truth).as_bytes(),
        )?;
        let title = format!("window {i} (origin {})", w.origin);
        write_atomic(
            &dir.join("plots").join(format!("{stem}.svg")),
            plot_svg(&w.consensus, &w.truth, &title).as_bytes(),
        )?;
    }

    let (csv, json) = report_bytes(&out.consensus_report)?;
    write_atomic(&dir.join("report_consensus.csv"), &csv)?;
    write_atomic(&dir.join("report_consensus.json"), &json)?;
    if let Some(b) = &out.baseline_report {
        let (csv, json) = report_bytes(b)?;
        write_atomic(&dir.join("report_baseline.csv"), &csv)?;
        write_atomic(&dir.join("report_baseline.json"), &json)?;
    }

    let specs = out.config.eval.specs();
    let summary = RunSummary {
        windows: out.windows.len(),
        origins: out.windows.iter().map(|w| w.origin).collect(),
        unconverged: out.unconverged,
        max_grad_norm: out
            .windows
            .iter()
            .map(|w| w.consensus.diagnostics().grad_norm)
            .fold(0.0, f64::max),
        max_iterations: out
            .windows
            .iter()
            .map(|w| w.consensus.diagnostics().iterations)
            .max()
            .unwrap_or(0),
        eval_specs: specs.iter().map(|s| s.name()).collect(),
    };
    write_atomic(&dir.join("summary.json"), &to_json(&summary)?)
}

/// `run`: execute and write artifacts. Non-convergence is reported as a
/// numerical failure after the artifacts are on disk.
pub fn cmd_run(config: ExperimentConfig) -> Result<RunOutput, CliError> {
    let started = Instant::now();
    let out = execute(config)?;
    let dir = out.config.output_dir.clone();
    write_artifacts(&out, &dir)?;
    log::info!(
        "{} windows reconciled in {:.2}s; artifacts in {}",
        out.windows.len(),
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    if out.unconverged > 0 {
        return Err(CliError::Numerical(format!(
            "covariance optimizer did not converge in {} of {} windows (artifacts written to {})",
            out.unconverged,
            out.windows.len(),
            dir.display()
        )));
    }
    Ok(out)
}

pub fn load_consensus(path: &Path) -> Result<ConsensusDistribution, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let q: ConsensusDistribution =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    q.validate().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(q)
}

/// What to marginalize in a query.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Spec { spec: AggregateSpec, window: usize },
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutput {
    pub mean: f64,
    pub variance: f64,
    pub stddev: f64,
    pub jointly_constrained: bool,
}

impl From<QueryResult> for QueryOutput {
    fn from(r: QueryResult) -> Self {
        Self {
            mean: r.mean,
            variance: r.variance,
            stddev: r.variance.sqrt(),
            jointly_constrained: r.jointly_constrained,
        }
    }
}

pub fn cmd_query(consensus: &Path, query: &Query) -> Result<QueryOutput, CliError> {
    let q = load_consensus(consensus)?;
    let weight = match query {
        Query::Spec { spec, window } => pad_weight(spec, *window, q.horizon())?,
        Query::Weights(w) => {
            if w.len() != q.horizon() {
                return Err(CliError::Data(format!(
                    "weight vector has length {} but the consensus horizon is {}",
                    w.len(),
                    q.horizon()
                )));
            }
            PaddedWeight::from_dense(w)
        }
    };
    Ok(q.marginalize(&weight)?.into())
}

/// A stored consensus and, when present, the level forecasts it came from.
type StoredWindow = (ConsensusDistribution, Option<Vec<GaussianForecast>>);

/// Stored artifacts of one run directory, paired by window file stem.
fn read_run_dir(dir: &Path) -> Result<Vec<StoredWindow>, CliError> {
    let cdir = dir.join("consensus");
    let mut paths: Vec<PathBuf> = fs::read_dir(&cdir)
        .map_err(|e| io_err(&cdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no consensus files in {}", cdir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let q = load_consensus(p)?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let fpath = dir.join("forecasts").join(format!("{stem}.csv"));
            let forecasts = if fpath.exists() {
                let file = fs::File::open(&fpath).map_err(|e| io_err(&fpath, e))?;
                Some(read_forecasts_csv(file).map_err(|e| CliError::Data(format!("{}: {e}", fpath.display())))?)
            } else {
                None
            };
            Ok((q, forecasts))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub consensus: ScoreReport,
    pub baseline: Option<ScoreReport>,
}

/// `eval`: score a run's stored consensus distributions against a truth
/// series on arbitrary aggregates, including ones never trained.
pub fn cmd_eval(run_dir: &Path, truth_csv: &Path, columns: &ColumnSpec, specs: &[AggregateSpec]) -> Result<EvalOutput, CliError> {
    let (truth, _) = ingest_csv(truth_csv, columns).map_err(|e| CliError::Data(e.to_string()))?;
    let stored = read_run_dir(run_dir)?;
    let mut truths = Vec::with_capacity(stored.len());
    for (q, _) in &stored {
        let origin = q
            .origin
            .ok_or_else(|| CliError::Data("consensus file has no origin; cannot align truth".into()))?;
        let end = origin + q.horizon();
        if end > truth.len() {
            return Err(CliError::Data(format!(
                "truth series has {} points but a window needs {end}",
                truth.len()
            )));
        }
        truths.push(truth.values()[origin..end].to_vec());
    }
    for spec in specs {
        for (q, _) in &stored {
            if q.horizon() % spec.window() != 0 {
                return Err(CliError::Config(format!(
                    "divisibility rule violated: horizon R={} is not divisible by K={}",
                    q.horizon(),
                    spec.window()
                )));
            }
        }
    }
    let pairs: Vec<_> = stored.iter().zip(&truths).map(|((q, _), y)| (q, y.as_slice())).collect();
    let consensus = evaluate_consensus(&pairs, specs)?;

    let base_forecasts: Option<Vec<&GaussianForecast>> = stored
        .iter()
        .map(|(_, f)| f.as_ref().and_then(|fs| fs.iter().find(|f| f.name == "base")))
        .collect();
    let baseline = match base_forecasts {
        Some(fs) => {
            let pairs: Vec<_> = fs.into_iter().zip(&truths).map(|(f, y)| (f, y.as_slice())).collect();
            Some(evaluate_baseline(&pairs, specs)?)
        }
        None => None,
    };
    Ok(EvalOutput { consensus, baseline })
}

pub fn write_eval(out: &EvalOutput, dir: &Path) -> Result<(), CliError> {
    let (csv, json) = report_bytes(&out.consensus)?;
    write_atomic(&dir.join("eval_consensus.csv"), &csv)?;
    write_atomic(&dir.join("eval_consensus.json"), &json)?;
    if let Some(b) = &out.baseline {
        let (csv, json) = report_bytes(b)?;
        write_atomic(&dir.join("eval_baseline.csv"), &csv)?;
        write_atomic(&dir.join("eval_baseline.json"), &json)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct InspectSummary {
    #[serde(rename = "R")]
    pub horizon: usize,
    pub k: usize,
    pub origin: Option<usize>,
    pub mean_min: f64,
    pub mean_max: f64,
    pub std_min: f64,
    pub std_max: f64,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

pub fn cmd_inspect(path: &Path) -> Result<InspectSummary, CliError> {
    let q = load_consensus(path)?;
    let stds: Vec<f64> = q.marginal_variances().iter().map(|v| v.sqrt()).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d = q.diagnostics();
    Ok(InspectSummary {
        horizon: q.horizon(),
        k: q.rank(),
        origin: q.origin,
        mean_min: min(q.mean()),
        mean_max: max(q.mean()),
        std_min: min(&stds),
        std_max: max(&stds),
        objective: d.objective,
        iterations: d.iterations,
        grad_norm: d.grad_norm,
        converged: d.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a/b/report.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, ["report.csv"]);
    }

    #[test]
    fn raw_weight_length_is_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let q = ConsensusDistribution::independent(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let path = tmp.path().join("q.json");
        fs::write(&path, serde_json::to_vec(&q).unwrap()).unwrap();
        let err = cmd_query(&path, &Query::Weights(vec![1.0; 3])).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let ok = cmd_query(&path, &Query::Weights(vec![0.5; 4])).unwrap();
        assert!((ok.variance - 1.0).abs() < 1e-15);
    }
}
