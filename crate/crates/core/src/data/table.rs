use std::collections::HashMap;
use std::ops::Range;

use chrono::{Datelike, NaiveDateTime, TimeDelta, Timelike};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Number of calendar feature rows produced by [`make_time_features`].
pub const TIME_FEATURES: usize = 4;

/// Timestamped `T × D` observation matrix. Missing values are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    /// `T` rows by `D` channel columns.
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    pub step: TimeDelta,
}

impl TimeSeriesTable {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Array2<f64>,
        channel_names: Vec<String>,
        step: TimeDelta,
    ) -> Result<Self, DataError> {
        if values.ncols() == 0 || channel_names.is_empty() {
            return Err(DataError::NoChannels);
        }
        if values.nrows() != timestamps.len() || values.ncols() != channel_names.len() {
            return Err(DataError::Dimension(format!(
                "{} timestamps, {} names, values {:?}",
                timestamps.len(),
                channel_names.len(),
                values.dim()
            )));
        }
        if step <= TimeDelta::zero() {
            return Err(DataError::Dimension("time step must be positive".into()));
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != step {
                return Err(DataError::NonConstantResolution {
                    step_secs: step.num_seconds(),
                    at: w[1].to_string(),
                });
            }
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
            step,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Rows `range` as a new table.
    pub fn rows(&self, range: Range<usize>) -> Self {
        Self {
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values.slice(ndarray::s![range, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
            step: self.step,
        }
    }

    /// The listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self, DataError> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channels()) {
            return Err(DataError::Dimension(format!("channel {bad} out of range")));
        }
        if channels.is_empty() {
            return Err(DataError::NoChannels);
        }
        Ok(Self {
            timestamps: self.timestamps.clone(),
            values: self.values.select(Axis(1), channels),
            channel_names: channels.iter().map(|&c| self.channel_names[c].clone()).collect(),
            step: self.step,
        })
    }

    /// Channel `d` as a contiguous series.
    pub fn channel(&self, d: usize) -> Vec<f64> {
        self.values.column(d).to_vec()
    }
}

/// Fills missing values with the mean of observed values that share the
/// same (month, day of week, hour) in the same channel, falling back to
/// the channel mean when that bucket has no observations.
pub fn impute_missing(table: &TimeSeriesTable) -> TimeSeriesTable {
    let mut out = table.clone();
    if table.missing_count() == 0 {
        return out;
    }
    let keys: Vec<(u32, u32, u32)> = table
        .timestamps
        .iter()
        .map(|t| (t.month(), t.weekday().num_days_from_monday(), t.hour()))
        .collect();
    for d in 0..table.channels() {
        let col = table.values.column(d);
        let mut buckets: HashMap<(u32, u32, u32), (f64, usize)> = HashMap::new();
        let (mut total, mut count) = (0.0, 0usize);
        for (key, &v) in keys.iter().zip(col.iter()) {
            if !v.is_nan() {
                let e = buckets.entry(*key).or_default();
                e.0 += v;
                e.1 += 1;
                total += v;
                count += 1;
            }
        }
        // a channel with no observations at all is left at zero
        let channel_mean = if count > 0 { total / count as f64 } else { 0.0 };
        for (row, key) in keys.iter().enumerate() {
            if out.values[[row, d]].is_nan() {
                out.values[[row, d]] = match buckets.get(key) {
                    Some(&(s, n)) if n > 0 => s / n as f64,
                    _ => channel_mean,
                };
            }
        }
    }
    out
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Statistics over `rows` of `table` (normally the training split).
    pub fn fit(table: &TimeSeriesTable, rows: Range<usize>) -> Result<Self, DataError> {
        if rows.is_empty() || rows.end > table.len() {
            return Err(DataError::Split(format!("cannot fit statistics on rows {rows:?}")));
        }
        let n = rows.len() as f64;
        let mut mean = Vec::with_capacity(table.channels());
        let mut std = Vec::with_capacity(table.channels());
        for d in 0..table.channels() {
            let col = table.values.slice(ndarray::s![rows.clone(), d]);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(DataError::ZeroVariance(table.channel_names[d].clone()));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, d: usize) -> Result<(), DataError> {
        if self.mean.len() != d || self.std.len() != d {
            return Err(DataError::Dimension(format!("stats for {} channels, table has {d}", self.mean.len())));
        }
        if let Some(i) = self.std.iter().position(|s| !(*s > 0.0)) {
            return Err(DataError::ZeroVariance(format!("channel {i}")));
        }
        Ok(())
    }

    pub fn standardize(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable, DataError> {
        self.check(table.channels())?;
        let mut out = table.clone();
        for (d, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[d]) / self.std[d]);
        }
        Ok(out)
    }

    pub fn destandardize(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable, DataError> {
        self.check(table.channels())?;
        let mut out = table.clone();
        for (d, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.std[d] + self.mean[d]);
        }
        Ok(out)
    }

    /// Maps a `D × H` standardized forecast back to raw units.
    pub fn destandardize_rows(&self, forecast: &Array2<f64>) -> Result<Array2<f64>, DataError> {
        self.check(forecast.nrows())?;
        let mut out = forecast.clone();
        for (d, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * self.std[d] + self.mean[d]);
        }
        Ok(out)
    }

    pub fn select(&self, channels: &[usize]) -> Self {
        Self {
            mean: channels.iter().map(|&c| self.mean[c]).collect(),
            std: channels.iter().map(|&c| self.std[c]).collect(),
        }
    }
}

/// Calendar features, one column per timestamp:
/// hour/23, weekday/6, (day−1)/30 and (month−1)/11, each shifted by −0.5.
pub fn make_time_features(timestamps: &[NaiveDateTime]) -> Array2<f64> {
    let mut out = Array2::zeros((TIME_FEATURES, timestamps.len()));
    for (t, ts) in timestamps.iter().enumerate() {
        out[[0, t]] = ts.hour() as f64 / 23.0 - 0.5;
        out[[1, t]] = ts.weekday().num_days_from_monday() as f64 / 6.0 - 0.5;
        out[[2, t]] = (ts.day() - 1) as f64 / 30.0 - 0.5;
        out[[3, t]] = (ts.month() - 1) as f64 / 11.0 - 0.5;
    }
    out
}
