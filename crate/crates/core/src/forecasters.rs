//! Per-level Gaussian forecasters.
//!
//! Every forecaster predicts each horizon step from history alone; a
//! prediction never feeds back into later steps. Three classical models are
//! provided: seasonal naive, least-squares autoregression and climatology.
//! Forecasts produced elsewhere can be imported through the CSV format in
//! [`write_forecasts_csv`] / [`read_forecasts_csv`].

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregates::{AggregateSeries, AggregateSpec};
use crate::error::{Error, Result};
use crate::series::{Normalizer, TimeSeries};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-6;
pub const DEFAULT_HISTORY_MULTIPLIER: usize = 2;

/// Independent per-step Gaussian predictions for one aggregate level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianForecast {
    pub level: usize,
    pub name: String,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianForecast {
    pub fn new(level: usize, name: impl Into<String>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if means.len() != stds.len() {
            return Err(Error::LengthMismatch {
                expected: means.len(),
                found: stds.len(),
            });
        }
        if let Some(j) = stds.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "forecast std at step {j} must be positive, got {}",
                stds[j]
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("forecast mean is not finite".into()));
        }
        Ok(Self {
            level,
            name: name.into(),
            means,
            stds,
        })
    }

    pub fn horizon(&self) -> usize {
        self.means.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecasterKind {
    SeasonalNaive { season: usize },
    ArLs { order: usize },
    Climatology,
}

fn default_multiplier() -> usize {
    DEFAULT_HISTORY_MULTIPLIER
}

fn default_sigma_min() -> f64 {
    DEFAULT_SIGMA_MIN
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    #[serde(flatten)]
    pub kind: ForecasterKind,
    /// Aggregate levels see `B * T / K` aggregated history points.
    #[serde(default = "default_multiplier")]
    pub history_multiplier: usize,
    /// Lower bound on predicted std, in normalized units.
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
}

impl ForecasterConfig {
    pub fn new(kind: ForecasterKind) -> Self {
        Self {
            kind,
            history_multiplier: DEFAULT_HISTORY_MULTIPLIER,
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ForecasterKind::SeasonalNaive { season: 0 } => {
                return Err(Error::InvalidForecaster("season length must be >= 1".into()))
            }
            ForecasterKind::ArLs { order: 0 } => {
                return Err(Error::InvalidForecaster("AR order must be >= 1".into()))
            }
            _ => {}
        }
        if self.history_multiplier == 0 {
            return Err(Error::InvalidForecaster("history multiplier B must be >= 1".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::InvalidForecaster("sigma_min must be positive".into()));
        }
        Ok(())
    }

    /// Training points the kind needs.
    pub fn min_train(&self) -> usize {
        match self.kind {
            ForecasterKind::SeasonalNaive { season } => season + 1,
            ForecasterKind::ArLs { order } => order + 1,
            ForecasterKind::Climatology => 2,
        }
    }

    /// History points the kind needs at prediction time.
    pub fn min_history(&self) -> usize {
        match self.kind {
            ForecasterKind::SeasonalNaive { season } => season,
            ForecasterKind::ArLs { order } => order,
            ForecasterKind::Climatology => 0,
        }
    }
}

/// Fitted parameters of one forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    SeasonalNaive {
        season: usize,
        /// RMS of the one-season-ahead copy residuals.
        sigma: f64,
    },
    ArLs {
        intercept: f64,
        /// `coeffs[l]` multiplies `y[t - 1 - l]`.
        coeffs: Vec<f64>,
        sigma: f64,
    },
    Climatology {
        mean: f64,
        std: f64,
    },
}

/// Fit a forecaster by maximum Gaussian likelihood over its model class.
pub fn fit(train: &[f64], config: &ForecasterConfig) -> Result<FittedModel> {
    config.validate()?;
    if train.len() < config.min_train() {
        return Err(Error::TooShort {
            needed: config.min_train(),
            available: train.len(),
        });
    }
    Ok(match config.kind {
        ForecasterKind::Climatology => {
            let n = train.len() as f64;
            let mean = train.iter().sum::<f64>() / n;
            let var = train.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            FittedModel::Climatology {
                mean,
                std: var.sqrt(),
            }
        }
        ForecasterKind::SeasonalNaive { season } => {
            let resid: Vec<f64> = (season..train.len())
                .map(|t| train[t] - train[t - season])
                .collect();
            FittedModel::SeasonalNaive {
                season,
                sigma: rms(&resid),
            }
        }
        ForecasterKind::ArLs { order } => fit_ar(train, order)?,
    })
}

fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|r| r * r).sum::<f64>() / xs.len() as f64).sqrt()
}

fn fit_ar(train: &[f64], order: usize) -> Result<FittedModel> {
    let rows = train.len() - order;
    let design = DMatrix::from_fn(rows, order + 1, |i, c| {
        let t = i + order;
        if c == 0 {
            1.0
        } else {
            train[t - c]
        }
    });
    let target = DVector::from_iterator(rows, train[order..].iter().copied());
    let svd = design.clone().svd(true, true);
    let beta = svd
        .solve(&target, 1e-12)
        .map_err(|e| Error::InvalidForecaster(format!("AR least squares failed: {e}")))?;
    let resid = &target - &design * &beta;
    Ok(FittedModel::ArLs {
        intercept: beta[0],
        coeffs: beta.iter().skip(1).copied().collect(),
        sigma: rms(resid.as_slice()),
    })
}

impl FittedModel {
    /// Gaussian log-likelihood of the training data under the model's
    /// one-step residuals, evaluated at a given `sigma`.
    pub fn train_log_likelihood(&self, train: &[f64], sigma: f64) -> f64 {
        let resid: Vec<f64> = match self {
            FittedModel::Climatology { mean, .. } => train.iter().map(|y| y - mean).collect(),
            FittedModel::SeasonalNaive { season, .. } => (*season..train.len())
                .map(|t| train[t] - train[t - season])
                .collect(),
            FittedModel::ArLs {
                intercept, coeffs, ..
            } => (coeffs.len()..train.len())
                .map(|t| {
                    let pred = coeffs
                        .iter()
                        .enumerate()
                        .fold(*intercept, |acc, (l, c)| acc + c * train[t - 1 - l]);
                    train[t] - pred
                })
                .collect(),
        };
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        resid
            .iter()
            .map(|r| -0.5 * ln_2pi - sigma.ln() - r * r / (2.0 * sigma * sigma))
            .sum()
    }

    pub fn sigma(&self) -> f64 {
        match self {
            FittedModel::SeasonalNaive { sigma, .. } | FittedModel::ArLs { sigma, .. } => *sigma,
            FittedModel::Climatology { std, .. } => *std,
        }
    }

    fn min_history(&self) -> usize {
        match self {
            FittedModel::SeasonalNaive { season, .. } => *season,
            FittedModel::ArLs { coeffs, .. } => coeffs.len(),
            FittedModel::Climatology { .. } => 0,
        }
    }

    /// Predict `horizon` steps from `history`; returns `(means, stds)` with
    /// stds floored at `sigma_min`.
    pub fn predict(&self, history: &[f64], horizon: usize, sigma_min: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if history.len() < self.min_history() {
            return Err(Error::TooShort {
                needed: self.min_history(),
                available: history.len(),
            });
        }
        let (means, stds): (Vec<f64>, Vec<f64>) = match self {
            FittedModel::Climatology { mean, std } => {
                (vec![*mean; horizon], vec![*std; horizon])
            }
            FittedModel::SeasonalNaive { season, sigma } => {
                let m = *season;
                let tail = &history[history.len() - m..];
                (0..horizon)
                    .map(|h| {
                        // the copy reaches back ceil((h+1)/m) seasons
                        let cycles = (h / m + 1) as f64;
                        (tail[h % m], sigma * cycles.sqrt())
                    })
                    .unzip()
            }
            FittedModel::ArLs {
                intercept,
                coeffs,
                sigma,
            } => {
                let p = coeffs.len();
                let mut path: Vec<f64> = history[history.len() - p..].to_vec();
                let mut psi: Vec<f64> = Vec::with_capacity(horizon);
                let mut means = Vec::with_capacity(horizon);
                let mut stds = Vec::with_capacity(horizon);
                let mut cum = 0.0;
                for h in 0..horizon {
                    let n = path.len();
                    let next = coeffs
                        .iter()
                        .enumerate()
                        .fold(*intercept, |acc, (l, c)| acc + c * path[n - 1 - l]);
                    path.push(next);
                    means.push(next);

                    let w = if h == 0 {
                        1.0
                    } else {
                        coeffs
                            .iter()
                            .enumerate()
                            .filter(|(l, _)| *l < h)
                            .map(|(l, c)| c * psi[h - 1 - l])
                            .sum()
                    };
                    psi.push(w);
                    cum += w * w;
                    stds.push(sigma * cum.sqrt());
                }
                (means, stds)
            }
        };
        let stds = stds.into_iter().map(|s| s.max(sigma_min)).collect();
        Ok((means, stds))
    }
}

/// A forecaster for one aggregate level, trained on the normalized aggregate
/// series and reporting forecasts in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelModel {
    pub level: usize,
    pub spec: AggregateSpec,
    pub config: ForecasterConfig,
    pub normalizer: Normalizer,
    pub model: FittedModel,
}

impl LevelModel {
    pub fn fit(level: usize, spec: &AggregateSpec, config: &ForecasterConfig, train: &AggregateSeries) -> Result<Self> {
        let normalizer = Normalizer::fit(&train.values)?;
        let model = fit(&normalizer.apply_all(&train.values), config)?;
        Ok(Self {
            level,
            spec: spec.clone(),
            config: *config,
            normalizer,
            model,
        })
    }

    /// Aggregated history points this level looks at: `T` for the base level,
    /// `B * T / K` for aggregates.
    pub fn history_len(&self, base_history: usize) -> usize {
        let k = self.spec.window();
        if k == 1 {
            base_history
        } else {
            (self.config.history_multiplier * base_history / k).max(1)
        }
    }

    /// Forecast the `R / K` aggregate values following the end of `base_past`.
    pub fn forecast(&self, base_past: &[f64], base_history: usize, horizon: usize) -> Result<GaussianForecast> {
        let k = self.spec.window();
        if !horizon.is_multiple_of(k) {
            return Err(Error::Divisibility { horizon, window: k });
        }
        let wanted = self.history_len(base_history) * k;
        let usable = wanted.min(base_past.len() / k * k);
        let tail = &base_past[base_past.len() - usable..];
        let history = self.normalizer.apply_all(&self.spec.aggregate_values(tail));
        let (mu, sd) = self
            .model
            .predict(&history, horizon / k, self.config.sigma_min)?;
        let (means, stds) = mu
            .iter()
            .zip(&sd)
            .map(|(&m, &s)| {
                let (m, v) = self.normalizer.invert_gaussian(m, s * s);
                (m, v.sqrt())
            })
            .unzip();
        GaussianForecast::new(self.level, self.spec.name(), means, stds)
    }
}

/// A level to forecast: which aggregate and which model.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetup {
    pub spec: AggregateSpec,
    pub config: ForecasterConfig,
}

/// Fit one forecaster per level on the aggregated training segment.
pub fn fit_levels(train: &TimeSeries, levels: &[LevelSetup], horizon: usize) -> Result<Vec<LevelModel>> {
    for l in levels {
        if !horizon.is_multiple_of(l.spec.window()) {
            return Err(Error::Divisibility {
                horizon,
                window: l.spec.window(),
            });
        }
    }
    levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let agg = crate::aggregates::aggregate_series(train, &l.spec)?;
            LevelModel::fit(i, &l.spec, &l.config, &agg)
        })
        .collect()
}

/// Fit every level and forecast the horizon following `train`.
pub fn fit_all_levels(
    train: &TimeSeries,
    levels: &[LevelSetup],
    base_history: usize,
    horizon: usize,
) -> Result<Vec<(LevelModel, GaussianForecast)>> {
    let models = fit_levels(train, levels, horizon)?;
    models
        .into_iter()
        .map(|m| {
            let f = m.forecast(train.values(), base_history, horizon)?;
            Ok((m, f))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ForecastRow {
    level: usize,
    name: String,
    j: usize,
    mu: f64,
    sigma: f64,
}

/// Write forecasts as CSV with columns `level,name,j,mu,sigma`.
pub fn write_forecasts_csv<W: Write>(writer: W, forecasts: &[GaussianForecast]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Csv {
        path: Default::default(),
        message: e.to_string(),
    };
    for f in forecasts {
        for (j, (&mu, &sigma)) in f.means.iter().zip(&f.stds).enumerate() {
            w.serialize(ForecastRow {
                level: f.level,
                name: f.name.clone(),
                j,
                mu,
                sigma,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Csv {
        path: Default::default(),
        message: e.to_string(),
    })
}

/// Read forecasts written by [`write_forecasts_csv`] or by an external system.
/// Rows are grouped by level; each level's `j` must run `0..R_i` without gaps.
pub fn read_forecasts_csv<R: Read>(reader: R) -> Result<Vec<GaussianForecast>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: Vec<ForecastRow> = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r.map_err(|e: csv::Error| Error::Csv {
            path: Default::default(),
            message: e.to_string(),
        })?);
    }
    rows.sort_by_key(|a| (a.level, a.j));
    let mut out: Vec<GaussianForecast> = Vec::new();
    for chunk in rows.chunk_by(|a, b| a.level == b.level) {
        for (expect, row) in chunk.iter().enumerate() {
            if row.j != expect {
                return Err(Error::InvalidArgument(format!(
                    "level {} is missing window index {expect}",
                    row.level
                )));
            }
        }
        out.push(GaussianForecast::new(
            chunk[0].level,
            chunk[0].name.clone(),
            chunk.iter().map(|r| r.mu).collect(),
            chunk.iter().map(|r| r.sigma).collect(),
        )?);
    }
    Ok(out)
}
