//! Time series ingestion, train/validation/test splitting, chunk sampling,
//! normalization and rolling evaluation windows.
//!
//! Indices in this module are 0-based and ranges are half-open. A training
//! segment of length `l_trn` therefore covers `0..l_trn`, and the validation
//! segment starts `T` points earlier so that its first forecast origin has a
//! full history.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the normalizer scale of a constant training segment.
pub const STD_FLOOR: f64 = 1e-8;

/// A univariate series with optional per-step exogenous features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<f64>,
    features: Option<Vec<Vec<f64>>>,
    labels: Option<Vec<String>>,
    /// Nominal sampling period, carried as metadata only.
    pub step: Option<String>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(Self {
            values,
            features: None,
            labels: None,
            step: None,
        })
    }

    pub fn with_features(values: Vec<f64>, features: Vec<Vec<f64>>) -> Result<Self> {
        let mut series = Self::new(values)?;
        if features.len() != series.values.len() {
            return Err(Error::LengthMismatch {
                expected: series.values.len(),
                found: features.len(),
            });
        }
        if let Some(first) = features.first() {
            let dim = first.len();
            for (row, f) in features.iter().enumerate() {
                if f.len() != dim {
                    return Err(Error::FeatureDimension {
                        row,
                        expected: dim,
                        found: f.len(),
                    });
                }
            }
        }
        series.features = Some(features);
        Ok(series)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Feature dimension `d`, or 0 when the series carries no features.
    pub fn feature_dim(&self) -> usize {
        self.features
            .as_ref()
            .and_then(|f| f.first())
            .map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy out a contiguous sub-series.
    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        TimeSeries {
            values: self.values[range.clone()].to_vec(),
            features: self.features.as_ref().map(|f| f[range.clone()].to_vec()),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
            step: self.step.clone(),
        }
    }
}

/// What to do with rows whose value (or a feature) is missing or unparseable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    ForwardFill,
}

/// Which CSV columns make up the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub value: String,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub missing: MissingPolicy,
}

impl ColumnSpec {
    pub fn value(column: impl Into<String>) -> Self {
        Self {
            value: column.into(),
            features: Vec::new(),
            timestamp: None,
            missing: MissingPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub rejected: usize,
    pub filled: usize,
}

fn parse_cell(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read a series from a CSV file with a header row.
pub fn ingest_csv(path: &Path, columns: &ColumnSpec) -> Result<(TimeSeries, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(file, columns).map_err(|e| match e {
        Error::Csv { message, .. } => Error::Csv {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Same as [`ingest_csv`] but over any reader.
pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    columns: &ColumnSpec,
) -> Result<(TimeSeries, IngestReport)> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: Default::default(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let value_idx = find(&columns.value)?;
    let feature_idx = columns
        .features
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let ts_idx = columns.timestamp.as_deref().map(find).transpose()?;

    let mut values = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut report = IngestReport {
        rows: 0,
        rejected: 0,
        filled: 0,
    };
    let mut first_bad: Option<(usize, String)> = None;

    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        report.rows += 1;
        let needed = feature_idx
            .iter()
            .copied()
            .chain(std::iter::once(value_idx))
            .chain(ts_idx)
            .max()
            .unwrap_or(0);
        if record.len() <= needed {
            return Err(Error::FeatureDimension {
                row,
                expected: feature_idx.len(),
                found: record.len().saturating_sub(1),
            });
        }

        let raw_value = &record[value_idx];
        let value = parse_cell(raw_value);
        let feats: Vec<Option<f64>> = feature_idx.iter().map(|&i| parse_cell(&record[i])).collect();
        let complete = value.is_some() && feats.iter().all(Option::is_some);

        if complete {
            values.push(value.unwrap());
            features.push(feats.into_iter().map(Option::unwrap).collect::<Vec<_>>());
        } else {
            if first_bad.is_none() {
                first_bad = Some((row, raw_value.to_string()));
            }
            match columns.missing {
                MissingPolicy::Reject => {
                    report.rejected += 1;
                    continue;
                }
                MissingPolicy::ForwardFill => {
                    let (Some(&prev_v), Some(prev_f)) = (values.last(), features.last()) else {
                        report.rejected += 1;
                        continue;
                    };
                    let prev_f: &Vec<f64> = prev_f;
                    let filled_f = feats
                        .iter()
                        .zip(prev_f)
                        .map(|(f, p)| f.unwrap_or(*p))
                        .collect();
                    values.push(value.unwrap_or(prev_v));
                    features.push(filled_f);
                    report.filled += 1;
                }
            }
        }
        if let Some(t) = ts_idx {
            labels.push(record[t].to_string());
        }
    }

    if values.is_empty() {
        let (row, raw) = first_bad.unwrap_or((0, String::new()));
        return Err(Error::Unparseable {
            row,
            column: columns.value.clone(),
            raw,
        });
    }
    if report.rejected > 0 {
        log::warn!(
            "rejected {} of {} rows with missing or unparseable values",
            report.rejected,
            report.rows
        );
    }

    let mut series = if feature_idx.is_empty() {
        TimeSeries::new(values)?
    } else {
        TimeSeries::with_features(values, features)?
    };
    if ts_idx.is_some() {
        series = series.with_labels(labels)?;
    }
    Ok((series, report))
}

/// Segment lengths plus the history and horizon used throughout an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// History length `T`.
    pub history: usize,
    /// Base forecast horizon `R`.
    pub horizon: usize,
}

impl SplitSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.history == 0 {
            return Err(Error::InvalidSplit("history length T must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidSplit("horizon R must be >= 1".into()));
        }
        if self.train + self.val + self.test != n {
            return Err(Error::InvalidSplit(format!(
                "train + val + test = {} but series length is {n}",
                self.train + self.val + self.test
            )));
        }
        if self.train < self.history + self.horizon {
            return Err(Error::InvalidSplit(format!(
                "train length {} is shorter than T + R = {}",
                self.train,
                self.history + self.horizon
            )));
        }
        if self.val > 0 && self.train < self.history {
            return Err(Error::InvalidSplit("validation history underflows".into()));
        }
        Ok(())
    }
}

/// Index ranges of the three segments. Validation and test each start with
/// `T` history points borrowed from the preceding segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate(n)?;
    let t = spec.history;
    let val_end = spec.train + spec.val;
    Ok(Split {
        train: 0..spec.train,
        val: spec.train - t..val_end,
        test: val_end.saturating_sub(t)..n,
    })
}

/// A training chunk of `T + R` contiguous points.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub start: usize,
    pub history: Vec<f64>,
    pub target: Vec<f64>,
    pub history_features: Option<Vec<Vec<f64>>>,
    pub target_features: Option<Vec<Vec<f64>>>,
}

/// Draws chunk start offsets uniformly from the admissible range of a
/// training segment. Reproducible for a fixed seed.
#[derive(Debug, Clone)]
pub struct ChunkSampler {
    rng: ChaCha8Rng,
    history: usize,
    horizon: usize,
}

impl ChunkSampler {
    pub fn new(seed: u64, history: usize, horizon: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            history,
            horizon,
        }
    }

    /// Next start offset in `0..=len - (T + R)`.
    pub fn next_start(&mut self, segment_len: usize) -> Result<usize> {
        let width = self.history + self.horizon;
        if segment_len < width || width == 0 {
            return Err(Error::TooShort {
                needed: width.max(1),
                available: segment_len,
            });
        }
        Ok(self.rng.random_range(0..=segment_len - width))
    }

    pub fn sample(&mut self, train: &TimeSeries) -> Result<Chunk> {
        let start = self.next_start(train.len())?;
        Ok(chunk_at(train, start, self.history, self.horizon))
    }
}

fn chunk_at(train: &TimeSeries, start: usize, history: usize, horizon: usize) -> Chunk {
    let mid = start + history;
    let end = mid + horizon;
    let v = train.values();
    Chunk {
        start,
        history: v[start..mid].to_vec(),
        target: v[mid..end].to_vec(),
        history_features: train.features().map(|f| f[start..mid].to_vec()),
        target_features: train.features().map(|f| f[mid..end].to_vec()),
    }
}

/// One-shot chunk draw from a fresh seeded generator.
pub fn sample_chunk(train: &TimeSeries, history: usize, horizon: usize, seed: u64) -> Result<Chunk> {
    ChunkSampler::new(seed, history, horizon).sample(train)
}

/// Affine normalizer fitted on a training segment (population std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(train: &[f64]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::TooShort {
                needed: 1,
                available: 0,
            });
        }
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if std < STD_FLOOR {
            log::warn!("constant training segment; normalizer scale floored at {STD_FLOOR}");
            std = STD_FLOOR;
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.apply(y)).collect()
    }

    /// Map a Gaussian `(mean, variance)` from normalized to original units.
    pub fn invert_gaussian(&self, mean: f64, variance: f64) -> (f64, f64) {
        (self.invert(mean), variance * self.std * self.std)
    }
}

/// A `(history, target)` pair of index ranges inside a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub history: Range<usize>,
    pub target: Range<usize>,
}

/// Enumerate rolling windows over a segment of length `len`, ordered by start.
pub fn rolling_windows(len: usize, history: usize, horizon: usize, stride: usize) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let width = history + horizon;
    if len < width || horizon == 0 {
        return Err(Error::TooShort {
            needed: width.max(1),
            available: len,
        });
    }
    Ok((0..=len - width)
        .step_by(stride)
        .map(|s| Window {
            history: s..s + history,
            target: s + history..s + width,
        })
        .collect())
}
