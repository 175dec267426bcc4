//! Time-series tables: ingestion, imputation, standardization, calendar
//! features, and (look-back, horizon) windows with chronological splits.

mod io;
pub mod synthetic;
mod table;
mod window;

use thiserror::Error;

pub use io::{load_table, read_table, write_matrix_csv, write_table, TableSchema, TIMESTAMP_FORMAT};
pub use table::{impute_missing, make_time_features, NormalizationStats, TimeSeriesTable, TIME_FEATURES};
pub use window::{sample_at, window_ends, window_samples, SplitBounds, SplitConfig, SplitKind, WindowSample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot parse timestamp {value:?} on line {line}")]
    Timestamp { line: usize, value: String },
    #[error("cannot parse value {value:?} in column {column:?} on line {line}")]
    Value { line: usize, column: String, value: String },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(String),
    #[error("timestamps do not sit on a constant {step_secs}s grid (offending stamp {at})")]
    NonConstantResolution { step_secs: i64, at: String },
    #[error("table has no channels")]
    NoChannels,
    #[error("table has no rows")]
    NoRows,
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("series of length {len} is too short for look-back {lookback} + horizon {horizon}")]
    TooShort { len: usize, lookback: usize, horizon: usize },
    #[error("channel {0:?} has zero variance")]
    ZeroVariance(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid window parameter: {0}")]
    Window(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
