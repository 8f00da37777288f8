//! Probabilistic scoring: CRPS (closed form for Gaussians, plus a quantile
//! integral used as an oracle), MAE, and per-aggregate score reports for
//! consensus and independent-baseline forecasts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::aggregates::{tile_horizon, AggregateKind, AggregateSpec};
use crate::consensus::ConsensusDistribution;
use crate::error::{Error, Result};
use crate::forecasters::GaussianForecast;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// CRPS of `N(mu, sigma^2)` at observation `y`:
/// `sigma * [z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]`, `z = (y - mu) / sigma`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let two_cdf_minus_one = erf(z / std::f64::consts::SQRT_2);
    let score = sigma * (z * two_cdf_minus_one + 2.0 * pdf - FRAC_1_SQRT_PI);
    Ok(score.max(0.0))
}

/// CRPS as the integral of the quantile loss over quantile levels, using a
/// midpoint rule with `grid` nodes on `(0, 1)`.
pub fn crps_quadrature<F: Fn(f64) -> f64>(inverse_cdf: F, y: f64, grid: usize) -> Result<f64> {
    if grid < 100 {
        return Err(Error::InvalidArgument(format!("quadrature grid {grid} < 100")));
    }
    let h = 1.0 / grid as f64;
    let mut total = 0.0;
    for i in 0..grid {
        let level = (i as f64 + 0.5) * h;
        let q = inverse_cdf(level);
        let indicator = if y < q { 1.0 } else { 0.0 };
        total += 2.0 * (level - indicator) * (y - q);
    }
    Ok(total * h)
}

pub fn mae(predicted: &[f64], truth: &[f64]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    predicted
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / predicted.len() as f64
}

/// Mean scores of one aggregate over all evaluated windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub level: String,
    #[serde(rename = "K")]
    pub window: usize,
    pub crps: f64,
    pub mae: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl ScoreReport {
    pub fn row(&self, level: &str, window: usize) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.level == level && r.window == window)
    }

    /// CSV with columns `level,K,metric,value,n_windows`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Csv {
            path: Default::default(),
            message: e.to_string(),
        };
        w.write_record(["level", "K", "metric", "value", "n_windows"]).map_err(err)?;
        for r in &self.rows {
            for (metric, value) in [("crps", r.crps), ("mae", r.mae)] {
                w.write_record([
                    r.level.clone(),
                    r.window.to_string(),
                    metric.to_string(),
                    format!("{value:.12e}"),
                    r.n_windows.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Csv {
            path: Default::default(),
            message: e.to_string(),
        })
    }
}

fn level_label(spec: &AggregateSpec) -> String {
    match spec.kind() {
        AggregateKind::Custom => spec.name().to_string(),
        kind => kind.as_str().to_string(),
    }
}

/// Per-window step-averaged scores, merged by summation.
#[derive(Debug, Default, Clone)]
struct Accumulator {
    crps: f64,
    mae: f64,
    windows: usize,
}

/// Score consensus distributions on aggregates of the realized future.
///
/// Each window's score is the mean over its `R / K` aggregate steps; the
/// report averages those window scores.
pub fn evaluate_consensus(windows: &[(&ConsensusDistribution, &[f64])], specs: &[AggregateSpec]) -> Result<ScoreReport> {
    let started = std::time::Instant::now();
    let mut acc: BTreeMap<usize, Accumulator> = BTreeMap::new();
    for (q, truth) in windows {
        let r = q.horizon();
        if truth.len() != r {
            return Err(Error::LengthMismatch {
                expected: r,
                found: truth.len(),
            });
        }
        for (si, spec) in specs.iter().enumerate() {
            let tiles = tile_horizon(spec, r)?;
            let actual = spec.aggregate_values(truth);
            let mut crps = 0.0;
            let mut means = Vec::with_capacity(tiles.len());
            for (tile, &y) in tiles.iter().zip(&actual) {
                let m = q.marginalize(tile)?;
                crps += crps_gaussian(m.mean, m.variance.sqrt(), y)?;
                means.push(m.mean);
            }
            let a = acc.entry(si).or_default();
            a.crps += crps / tiles.len() as f64;
            a.mae += mae(&means, &actual);
            a.windows += 1;
        }
    }
    let rows = specs
        .iter()
        .enumerate()
        .map(|(si, spec)| {
            let a = acc.remove(&si).unwrap_or_default();
            let n = a.windows.max(1) as f64;
            ScoreRow {
                level: level_label(spec),
                window: spec.window(),
                crps: a.crps / n,
                mae: a.mae / n,
                n_windows: a.windows,
            }
        })
        .collect();
    Ok(ScoreReport {
        rows,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Score independent base forecasts aggregated under an independence
/// assumption: mean `a^T mu_hat`, variance `sum a_t^2 sigma_hat_t^2`.
pub fn evaluate_baseline(windows: &[(&GaussianForecast, &[f64])], specs: &[AggregateSpec]) -> Result<ScoreReport> {
    let independent = windows
        .iter()
        .map(|(f, _)| ConsensusDistribution::independent(f.means.clone(), f.stds.clone()))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = independent.iter().zip(windows).map(|(q, (_, y))| (q, *y)).collect();
    evaluate_consensus(&pairs, specs)
}

/// Plot data for one window: `t,truth,mean,lower,upper` with a `±2 sd` band.
pub fn plot_csv(q: &ConsensusDistribution, truth: &[f64]) -> String {
    let var = q.marginal_variances();
    let mut out = String::from("t,truth,mean,lower,upper\n");
    for (t, ((m, v), y)) in q.mean().iter().zip(&var).zip(truth).enumerate() {
        let sd = v.sqrt();
        let _ = writeln!(out, "{t},{y:.9e},{m:.9e},{:.9e},{:.9e}", m - 2.0 * sd, m + 2.0 * sd);
    }
    out
}

/// A minimal standalone SVG chart of truth, mean and the `±2 sd` band.
pub fn plot_svg(q: &ConsensusDistribution, truth: &[f64], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 300.0;
    const PAD: f64 = 30.0;
    let var = q.marginal_variances();
    let mu = q.mean();
    let n = mu.len();
    let lower: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| m - 2.0 * v.sqrt()).collect();
    let upper: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| m + 2.0 * v.sqrt()).collect();
    let lo = lower.iter().chain(truth).fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = upper.iter().chain(truth).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |t: usize| PAD + (W - 2.0 * PAD) * t as f64 / (n.max(2) - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
    let path = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let band: Vec<String> = upper
        .iter()
        .enumerate()
        .map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
        .chain(lower.iter().enumerate().rev().map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v))))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{PAD}" y="18" font-size="12" font-family="sans-serif">{title}</text>"#);
    let _ = writeln!(svg, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5"/>"##, band.join(" "));
    let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##, path(mu));
    let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1"/>"#, path(truth));
    svg.push_str("</svg>\n");
    svg
}
