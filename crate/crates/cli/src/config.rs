//! Experiment configuration (JSON).
//!
//! ```json
//! {
//!   "dataset": { "path": "synthetic.csv", "value": "y" },
//!   "split": { "train": 5600, "val": 800, "test": 1600, "history": 336, "horizon": 168 },
//!   "levels": [
//!     { "aggregate": { "kind": "base" }, "forecaster": { "kind": "climatology" } },
//!     { "aggregate": { "kind": "average", "K": 6 }, "forecaster": { "kind": "ar_ls", "order": 4 } }
//!   ],
//!   "eval": { "kinds": ["base", "average", "halfdiff"], "K": [1, 4, 8, 24] },
//!   "output_dir": "out"
//! }
//! ```
//!
//! Omitted fields take the defaults in this module; the fully resolved
//! configuration is written next to the run's artifacts.

use std::path::{Path, PathBuf};

use coheragg::aggregates::{AggregateKind, AggregateSpec};
use coheragg::consensus::{AlphaMap, ConsensusConfig};
use coheragg::forecasters::ForecasterConfig;
use coheragg::series::ColumnSpec;
use coheragg::SplitSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(flatten)]
    pub columns: ColumnSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub aggregate: AggregateSpec,
    pub forecaster: ForecasterConfig,
    /// Overrides the per-kind weight from `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Aggregate kinds to score; each is paired with every compatible `K`.
    #[serde(default = "default_kinds")]
    pub kinds: Vec<AggregateKind>,
    #[serde(rename = "K", default = "default_windows")]
    pub windows: Vec<usize>,
    /// Additional aggregates scored as-is (e.g. custom weights).
    #[serde(default)]
    pub extra: Vec<AggregateSpec>,
}

fn default_kinds() -> Vec<AggregateKind> {
    vec![AggregateKind::Base]
}

fn default_windows() -> Vec<usize> {
    vec![1]
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kinds: default_kinds(),
            windows: default_windows(),
            extra: Vec::new(),
        }
    }
}

impl EvalConfig {
    /// Expand kinds x K into concrete specs, skipping combinations a kind
    /// cannot form (odd K for halfdiff, K=1 for trend, K>1 for base).
    pub fn specs(&self) -> Vec<AggregateSpec> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &k in &self.windows {
                if let Ok(spec) = AggregateSpec::new(kind, k) {
                    out.push(spec);
                }
            }
        }
        out.extend(self.extra.iter().cloned());
        out
    }
}

fn default_workers() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub levels: Vec<LevelConfig>,
    #[serde(default)]
    pub alpha: AlphaMap,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub segment: Segment,
    /// Rolling stride; defaults to the horizon (disjoint windows).
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

pub const OUTPUT_DIR_ENV: &str = "COHERAGG_OUTPUT_DIR";

impl ExperimentConfig {
    /// Read a config file; relative paths resolve against its directory and
    /// the output directory may be overridden by the environment.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.path.is_relative() {
            cfg.dataset.path = base.join(&cfg.dataset.path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    /// Fill per-kind defaults so the resolved config records every weight.
    pub fn resolve(&mut self) {
        // The top-level seed drives every random draw of the run.
        self.consensus.optimizer.seed = self.seed;
        if self.stride.is_none() {
            self.stride = Some(self.split.horizon);
        }
        for level in &mut self.levels {
            if level.alpha.is_none() {
                level.alpha = Some(self.alpha.for_kind(level.aggregate.kind()));
            }
        }
    }

    /// Check every precondition that does not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        let r = self.split.horizon;
        let t = self.split.history;
        if r == 0 || t == 0 {
            return Err(CliError::Config("history T and horizon R must be >= 1".into()));
        }
        if self.split.train < t + r {
            return Err(CliError::Config(format!(
                "train length {} is shorter than T + R = {}",
                self.split.train,
                t + r
            )));
        }
        if self.levels.is_empty() {
            return Err(CliError::Config("at least one level is required".into()));
        }
        for level in &self.levels {
            let k = level.aggregate.window();
            if !r.is_multiple_of(k) {
                return Err(CliError::Config(format!(
                    "divisibility rule violated: horizon R={r} is not divisible by window K={k} of level '{}'",
                    level.aggregate.name()
                )));
            }
            level
                .forecaster
                .validate()
                .map_err(|e| CliError::Config(format!("level '{}': {e}", level.aggregate.name())))?;
            if let Some(a) = level.alpha {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(CliError::Config(format!(
                        "level '{}': alpha must be positive",
                        level.aggregate.name()
                    )));
                }
            }
        }
        for spec in self.eval.specs() {
            if !r.is_multiple_of(spec.window()) {
                return Err(CliError::Config(format!(
                    "divisibility rule violated: horizon R={r} is not divisible by evaluation window K={}",
                    spec.window()
                )));
            }
        }
        let a = &self.alpha;
        if [a.base, a.average, a.trend, a.halfdiff, a.custom]
            .iter()
            .any(|x| !(*x > 0.0 && x.is_finite()))
        {
            return Err(CliError::Config("alpha weights must be positive".into()));
        }
        let opt = &self.consensus.optimizer;
        if !(opt.tol > 0.0 && opt.initial_step > 0.0 && opt.log_coeff > 0.0 && opt.init_scale >= 0.0) {
            return Err(CliError::Config(
                "optimizer tol, initial_step, log_coeff must be positive".into(),
            ));
        }
        if self.stride == Some(0) {
            return Err(CliError::Config("stride must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}
