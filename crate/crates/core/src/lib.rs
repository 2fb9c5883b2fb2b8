//! Demand forecasting for weather-sensitive retail products.
//!
//! The crate covers the whole modeling chain: CSV ingestion of sales,
//! weather and store/station tables ([`ingest`]), a seeded synthetic data
//! generator ([`synth`]), CART forests with out-of-bag permutation
//! importance ([`forest`]), feed-forward, time-delay and Elman networks
//! ([`neural`]), an OLS baseline ([`baseline`]), metrics and comparison
//! harnesses ([`eval`]) and the staged, resumable pipeline ([`pipeline`]).

pub mod baseline;
pub mod data;
pub mod error;
pub mod eval;
pub mod forest;
pub mod ingest;
pub mod model_file;
pub mod neural;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use data::{CalendarDate, FeatureTable, RowKey, SplitSpec};
pub use error::{Error, ErrorKind, Result};

/// Anything that maps a feature table to log-scale predictions.
pub trait Predictor {
    /// Columns the model was trained on, in order.
    fn input_columns(&self) -> &[String];

    /// One prediction per row of `table` (log1p scale).
    fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>>;
}
