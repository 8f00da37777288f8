//! Linear temporal aggregates over disjoint windows.
//!
//! An aggregate is a window size `K` and a weight vector `a` of length `K`;
//! the `j`-th aggregated value is `a · y[j*K .. (j+1)*K]`. Window indices are
//! 0-based throughout.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateKind {
    /// The original series, `K = 1`, `a = [1]`.
    Base,
    /// Window mean.
    Average,
    /// Least-squares slope of a line through the window.
    Trend,
    /// Mean of the second half minus mean of the first half.
    Halfdiff,
    Custom,
}

impl AggregateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregateKind::Base => "base",
            AggregateKind::Average => "average",
            AggregateKind::Trend => "trend",
            AggregateKind::Halfdiff => "halfdiff",
            AggregateKind::Custom => "custom",
        }
    }
}

impl fmt::Display for AggregateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AggregateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(AggregateKind::Base),
            "average" => Ok(AggregateKind::Average),
            "trend" => Ok(AggregateKind::Trend),
            "halfdiff" => Ok(AggregateKind::Halfdiff),
            "custom" => Ok(AggregateKind::Custom),
            other => Err(Error::InvalidAggregate(format!("unknown aggregate kind '{other}'"))),
        }
    }
}

/// A named linear aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct AggregateSpec {
    name: String,
    kind: AggregateKind,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    #[serde(default)]
    name: Option<String>,
    kind: AggregateKind,
    #[serde(rename = "K", default)]
    window: Option<usize>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

impl TryFrom<RawSpec> for AggregateSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let window = match (raw.window, &raw.weights) {
            (Some(k), _) => k,
            (None, Some(w)) => w.len(),
            (None, None) if raw.kind == AggregateKind::Base => 1,
            (None, None) => {
                return Err(Error::InvalidAggregate(format!(
                    "{} aggregate needs K",
                    raw.kind
                )))
            }
        };
        let spec = match raw.kind {
            AggregateKind::Custom => {
                let weights = raw.weights.ok_or_else(|| {
                    Error::InvalidAggregate("custom aggregate needs weights".into())
                })?;
                if weights.len() != window {
                    return Err(Error::InvalidAggregate(format!(
                        "custom aggregate has K={window} but {} weights",
                        weights.len()
                    )));
                }
                AggregateSpec::custom(raw.name.as_deref().unwrap_or("custom"), weights)?
            }
            kind => AggregateSpec::new(kind, window)?,
        };
        Ok(match raw.name {
            Some(name) => spec.with_name(name),
            None => spec,
        })
    }
}

impl From<AggregateSpec> for RawSpec {
    fn from(spec: AggregateSpec) -> Self {
        RawSpec {
            name: Some(spec.name),
            kind: spec.kind,
            window: Some(spec.weights.len()),
            weights: Some(spec.weights),
        }
    }
}

impl AggregateSpec {
    /// Build one of the named aggregates with window size `window`.
    pub fn new(kind: AggregateKind, window: usize) -> Result<Self> {
        let k = window as f64;
        let weights = match kind {
            AggregateKind::Base => {
                if window != 1 {
                    return Err(Error::InvalidAggregate(format!(
                        "base aggregate requires K=1, got {window}"
                    )));
                }
                vec![1.0]
            }
            AggregateKind::Average => {
                if window == 0 {
                    return Err(Error::InvalidAggregate("average requires K >= 1".into()));
                }
                vec![1.0 / k; window]
            }
            AggregateKind::Trend => {
                if window < 2 {
                    return Err(Error::InvalidAggregate(format!(
                        "trend requires K >= 2, got {window}"
                    )));
                }
                // r/K - (K+1)/(2K), written so mirrored weights are exact negatives
                (1..=window)
                    .map(|r| (2.0 * r as f64 - k - 1.0) / (2.0 * k))
                    .collect()
            }
            AggregateKind::Halfdiff => {
                if window == 0 || !window.is_multiple_of(2) {
                    return Err(Error::InvalidAggregate(format!(
                        "halfdiff requires an even K >= 2, got {window}"
                    )));
                }
                (0..window)
                    .map(|r| if r < window / 2 { -2.0 / k } else { 2.0 / k })
                    .collect()
            }
            AggregateKind::Custom => {
                return Err(Error::InvalidAggregate(
                    "custom aggregates are built with AggregateSpec::custom".into(),
                ))
            }
        };
        let name = if kind == AggregateKind::Base {
            "base".to_string()
        } else {
            format!("{kind}_{window}")
        };
        Ok(Self {
            name,
            kind,
            weights,
        })
    }

    pub fn base() -> Self {
        Self::new(AggregateKind::Base, 1).expect("base spec is always valid")
    }

    pub fn custom(name: &str, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidAggregate("custom weights are empty".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidAggregate("custom weights are all zero".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidAggregate("custom weights must be finite".into()));
        }
        Ok(Self {
            name: name.to_string(),
            kind: AggregateKind::Custom,
            weights,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> AggregateKind {
        self.kind
    }

    /// Window size `K`.
    pub fn window(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Apply the weights to one window of exactly `K` values.
    pub fn apply(&self, window: &[f64]) -> f64 {
        debug_assert_eq!(window.len(), self.window());
        if self.kind == AggregateKind::Trend {
            // pair mirrored terms so a constant window gives exactly zero
            let k = self.window();
            return (0..k / 2).fold(0.0, |acc, r| {
                acc + self.weights[k - 1 - r] * (window[k - 1 - r] - window[r])
            });
        }
        self.weights
            .iter()
            .zip(window)
            .fold(0.0, |acc, (a, y)| acc + a * y)
    }

    /// Aggregate a plain slice on disjoint windows, dropping the remainder.
    pub fn aggregate_values(&self, values: &[f64]) -> Vec<f64> {
        values
            .chunks_exact(self.window())
            .map(|w| self.apply(w))
            .collect()
    }
}

/// A series aggregated on disjoint windows of its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    pub spec: AggregateSpec,
    pub values: Vec<f64>,
    /// Per-window feature means, when the parent has features.
    pub features: Option<Vec<Vec<f64>>>,
    /// Trailing parent points that did not fill a whole window.
    pub dropped: usize,
}

pub fn aggregate_series(series: &TimeSeries, spec: &AggregateSpec) -> Result<AggregateSeries> {
    let k = spec.window();
    if series.len() < k {
        return Err(Error::TooShort {
            needed: k,
            available: series.len(),
        });
    }
    let dropped = series.len() % k;
    if dropped > 0 {
        log::debug!(
            "{}: dropping {dropped} trailing points that do not fill a window",
            spec.name()
        );
    }
    let features = series.features().map(|rows| {
        rows.chunks_exact(k)
            .map(|window| {
                let dim = window[0].len();
                (0..dim)
                    .map(|c| window.iter().map(|r| r[c]).sum::<f64>() / k as f64)
                    .collect()
            })
            .collect()
    });
    Ok(AggregateSeries {
        spec: spec.clone(),
        values: spec.aggregate_values(series.values()),
        features,
        dropped,
    })
}

/// An aggregate's weights embedded in a horizon of length `R`. Stored
/// sparsely as an offset plus the coefficients of the support block.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedWeight {
    horizon: usize,
    start: usize,
    coeffs: Vec<f64>,
}

impl PaddedWeight {
    /// Wrap an arbitrary dense query vector. The support is trimmed to the
    /// span between the first and last nonzero entries.
    pub fn from_dense(dense: &[f64]) -> Self {
        let first = dense.iter().position(|&w| w != 0.0);
        let last = dense.iter().rposition(|&w| w != 0.0);
        match (first, last) {
            (Some(a), Some(b)) => Self {
                horizon: dense.len(),
                start: a,
                coeffs: dense[a..=b].to_vec(),
            },
            _ => Self {
                horizon: dense.len(),
                start: 0,
                coeffs: Vec::new(),
            },
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Index block covered by the nonzero coefficients.
    pub fn support(&self) -> Range<usize> {
        self.start..self.start + self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// `(index, weight)` pairs over the support.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, &w)| (self.start + i, w))
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.horizon);
        self.iter().fold(0.0, |acc, (t, w)| acc + w * x[t])
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.horizon];
        out[self.support()].copy_from_slice(&self.coeffs);
        out
    }
}

/// Place the weights of window `window` (0-based) inside a horizon of `horizon` steps.
pub fn pad_weight(spec: &AggregateSpec, window: usize, horizon: usize) -> Result<PaddedWeight> {
    let k = spec.window();
    let start = window * k;
    if start + k > horizon {
        return Err(Error::InvalidAggregate(format!(
            "window {window} of {} spans {}..{} beyond horizon {horizon}",
            spec.name(),
            start,
            start + k
        )));
    }
    Ok(PaddedWeight {
        horizon,
        start,
        coeffs: spec.weights().to_vec(),
    })
}

/// One padded weight per forecast window, tiling the whole horizon.
pub fn tile_horizon(spec: &AggregateSpec, horizon: usize) -> Result<Vec<PaddedWeight>> {
    let k = spec.window();
    if horizon == 0 || !horizon.is_multiple_of(k) {
        return Err(Error::Divisibility { horizon, window: k });
    }
    (0..horizon / k).map(|j| pad_weight(spec, j, horizon)).collect()
}
