//! Coherent probabilistic forecasts over temporal aggregates.
//!
//! Independent Gaussian forecasters are trained for the base series and for
//! a set of linear aggregates (window means, trends, ...). Their forecasts
//! are reconciled into one joint Gaussian over the horizon with a low-rank
//! plus diagonal covariance, from which the distribution of any linear
//! aggregate, including ones never trained, follows in closed form.

pub mod aggregates;
pub mod consensus;
pub mod error;
pub mod evaluation;
pub mod forecasters;
pub mod series;

pub use aggregates::{AggregateKind, AggregateSeries, AggregateSpec, PaddedWeight};
pub use consensus::{
    AlphaMap, ConsensusConfig, ConsensusDistribution, ConsensusProblem, LevelForecast,
    Method, OptimizerConfig, QueryResult,
};
pub use error::{Error, Result};
pub use evaluation::{crps_gaussian, ScoreReport};
pub use forecasters::{ForecasterConfig, ForecasterKind, GaussianForecast, LevelModel, LevelSetup};
pub use series::{ColumnSpec, Normalizer, SplitSpec, TimeSeries};
