use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDateTime, TimeDelta};
use ndarray::Array2;

use super::{DataError, TimeSeriesTable};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Which columns of a delimited file hold the timestamp and the channels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableSchema {
    /// Timestamp column name; the first column when `None`.
    pub timestamp_column: Option<String>,
    /// Channel columns in output order; every other column when `None`.
    pub channels: Option<Vec<String>>,
    /// Grid step in seconds; inferred as the most frequent gap when `None`.
    pub resolution_secs: Option<i64>,
}

impl TableSchema {
    pub fn hourly() -> Self {
        Self {
            resolution_secs: Some(3600),
            ..Self::default()
        }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim().to_ascii_lowercase().as_str(), "" | "nan" | "na" | "null" | "?")
}

pub fn load_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<TimeSeriesTable, DataError> {
    read_table(File::open(path)?, schema)
}

/// Parses a comma-separated table with a header row; lines starting with
/// `#` are skipped.
///
/// Rows are sorted by time; gaps in the timestamp grid become all-`NaN`
/// rows. Duplicate stamps and stamps off the grid are rejected.
pub fn read_table<R: Read>(input: R, schema: &TableSchema) -> Result<TimeSeriesTable, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let ts_col = match &schema.timestamp_column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::UnknownColumn(name.clone()))?,
        None => 0,
    };
    let channel_cols: Vec<usize> = match &schema.channels {
        Some(names) => names
            .iter()
            .map(|n| headers.iter().position(|h| h == n).ok_or_else(|| DataError::UnknownColumn(n.clone())))
            .collect::<Result<_, _>>()?,
        None => (0..headers.len()).filter(|&c| c != ts_col).collect(),
    };
    if channel_cols.is_empty() {
        return Err(DataError::NoChannels);
    }

    let mut rows: BTreeMap<NaiveDateTime, Vec<f64>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let raw = record.get(ts_col).unwrap_or_default();
        let ts = NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT).map_err(|_| DataError::Timestamp {
            line,
            value: raw.to_string(),
        })?;
        let mut vals = Vec::with_capacity(channel_cols.len());
        for &c in &channel_cols {
            let field = record.get(c).unwrap_or_default();
            if is_missing(field) {
                vals.push(f64::NAN);
            } else {
                vals.push(field.parse::<f64>().map_err(|_| DataError::Value {
                    line,
                    column: headers[c].clone(),
                    value: field.to_string(),
                })?);
            }
        }
        if rows.insert(ts, vals).is_some() {
            return Err(DataError::DuplicateTimestamp(ts.to_string()));
        }
    }
    if rows.is_empty() {
        return Err(DataError::NoRows);
    }

    let stamps: Vec<NaiveDateTime> = rows.keys().copied().collect();
    let step_secs = match schema.resolution_secs {
        Some(s) if s > 0 => s,
        Some(s) => return Err(DataError::Dimension(format!("resolution must be positive, got {s}"))),
        None => infer_step(&stamps).unwrap_or(3600),
    };
    let step = TimeDelta::seconds(step_secs);

    let first = stamps[0];
    let last = *stamps.last().unwrap();
    for &ts in &stamps {
        if (ts - first).num_seconds() % step_secs != 0 {
            return Err(DataError::NonConstantResolution {
                step_secs,
                at: ts.to_string(),
            });
        }
    }
    let total = ((last - first).num_seconds() / step_secs) as usize + 1;
    let width = channel_cols.len();
    let mut values = Array2::from_elem((total, width), f64::NAN);
    for (ts, vals) in &rows {
        let r = ((*ts - first).num_seconds() / step_secs) as usize;
        for (d, v) in vals.iter().enumerate() {
            values[[r, d]] = *v;
        }
    }
    let timestamps = (0..total).map(|i| first + step * i as i32).collect();
    let names = channel_cols.iter().map(|&c| headers[c].clone()).collect();
    TimeSeriesTable::new(timestamps, values, names, step)
}

/// Most frequent positive gap between consecutive stamps; the smaller gap wins ties.
fn infer_step(stamps: &[NaiveDateTime]) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for w in stamps.windows(2) {
        *counts.entry((w[1] - w[0]).num_seconds()).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, n)| n == best).map(|(s, _)| s)
}

pub fn write_table<W: Write>(out: W, table: &TimeSeriesTable) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend(table.channel_names.iter().cloned());
    w.write_record(&header)?;
    for (r, ts) in table.timestamps.iter().enumerate() {
        let mut rec = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
        rec.extend(table.values.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a plain numeric matrix with an optional header row.
pub fn write_matrix_csv<W: Write>(out: W, header: Option<&[String]>, rows: &Array2<f64>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in rows.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
