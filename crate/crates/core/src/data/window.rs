use std::ops::Range;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{DataError, TimeSeriesTable};

/// One (look-back, horizon) pair cut from a table.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `D × L`, rows are channels.
    pub lookback: Array2<f64>,
    /// `D × H`.
    pub target: Array2<f64>,
    /// `F × L` calendar features of the look-back instants.
    pub time_features: Array2<f64>,
    /// `F × H` calendar features of the horizon instants.
    pub target_time_features: Array2<f64>,
    /// Row index of the last look-back instant.
    pub t_end: usize,
}

impl WindowSample {
    pub fn lookback_len(&self) -> usize {
        self.lookback.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.target.ncols()
    }

    pub fn channels(&self) -> usize {
        self.lookback.nrows()
    }
}

/// Cuts the sample whose look-back ends at row `t_end`.
///
/// `time_features` is the `F × T` calendar matrix of the whole table.
pub fn sample_at(
    table: &TimeSeriesTable,
    time_features: &Array2<f64>,
    t_end: usize,
    lookback: usize,
    horizon: usize,
) -> Result<WindowSample, DataError> {
    if lookback == 0 || horizon == 0 {
        return Err(DataError::Window("look-back and horizon must be positive".into()));
    }
    if t_end + 1 < lookback || t_end + horizon >= table.len() {
        return Err(DataError::TooShort {
            len: table.len(),
            lookback,
            horizon,
        });
    }
    let start = t_end + 1 - lookback;
    let stop = t_end + 1 + horizon;
    Ok(WindowSample {
        lookback: table.values.slice(s![start..=t_end, ..]).t().to_owned(),
        target: table.values.slice(s![t_end + 1..stop, ..]).t().to_owned(),
        time_features: time_features.slice(s![.., start..=t_end]).to_owned(),
        target_time_features: time_features.slice(s![.., t_end + 1..stop]).to_owned(),
        t_end,
    })
}

/// Look-back end rows of every stride-spaced window with full look-back and
/// horizon inside `rows` of a series.
///
/// The look-back may start before `rows.start` (down to `rows.start − L`,
/// never below 0); targets always lie inside `rows`.
pub fn window_ends(rows: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>, DataError> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::Window(format!(
            "look-back {lookback}, horizon {horizon}, stride {stride} must all be positive"
        )));
    }
    let first = (lookback - 1).max(rows.start.saturating_sub(1));
    if rows.end < horizon + 1 || first + horizon >= rows.end {
        return Err(DataError::TooShort {
            len: rows.len(),
            lookback,
            horizon,
        });
    }
    let last = rows.end - horizon - 1;
    Ok((first..=last).step_by(stride).collect())
}

/// All stride-spaced samples of `table`; there are
/// `floor((T − L − H) / stride) + 1` of them.
pub fn window_samples(
    table: &TimeSeriesTable,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, DataError> {
    let features = super::make_time_features(&table.timestamps);
    window_ends(0..table.len(), lookback, horizon, stride)?
        .into_iter()
        .map(|t| sample_at(table, &features, t, lookback, horizon))
        .collect()
}

/// Chronological train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Contiguous row ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train_fraction, self.val_fraction, self.test_fraction];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Split(format!("fractions {parts:?} must be nonnegative and sum to 1")));
        }
        if self.train_fraction == 0.0 {
            return Err(DataError::Split("training fraction must be positive".into()));
        }
        Ok(())
    }

    /// Train gets `floor(T·train)` rows, validation `floor(T·val)`, test the rest.
    pub fn bounds(&self, len: usize) -> Result<SplitBounds, DataError> {
        self.validate()?;
        let n_train = (len as f64 * self.train_fraction).floor() as usize;
        let n_val = (len as f64 * self.val_fraction).floor() as usize;
        if n_train == 0 {
            return Err(DataError::Split(format!("{len} rows leave an empty training split")));
        }
        Ok(SplitBounds {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..len,
        })
    }
}

impl SplitBounds {
    pub fn range(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{NaiveDate, TimeDelta};
    use proptest::prelude::*;

    fn ramp(len: usize, channels: usize) -> TimeSeriesTable {
        let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let ts = (0..len).map(|i| start + TimeDelta::hours(i as i64)).collect();
        let vals = Array2::from_shape_fn((len, channels), |(t, d)| (t * 10 + d) as f64);
        let names = (0..channels).map(|d| format!("c{d}")).collect();
        TimeSeriesTable::new(ts, vals, names, TimeDelta::hours(1)).unwrap()
    }

    #[test]
    fn sample_counts_at_the_edges() {
        assert_eq!(window_samples(&ramp(10, 1), 3, 2, 1).unwrap().len(), 6);
        assert_eq!(window_samples(&ramp(5, 1), 3, 2, 1).unwrap().len(), 1);
        assert!(matches!(window_samples(&ramp(4, 1), 3, 2, 1), Err(DataError::TooShort { .. })));
    }

    #[test]
    fn lookback_matches_direct_indexing() {
        let t = ramp(30, 3);
        for s in window_samples(&t, 5, 3, 2).unwrap() {
            for d in 0..3 {
                for l in 0..5 {
                    assert_eq!(s.lookback[[d, l]], t.values[[s.t_end + 1 - 5 + l, d]]);
                }
                for h in 0..3 {
                    assert_eq!(s.target[[d, h]], t.values[[s.t_end + 1 + h, d]]);
                }
            }
            assert!(s.time_features.iter().all(|v| (-0.5..=0.5).contains(v)));
        }
    }

    #[test]
    fn split_windows_do_not_leak() {
        let bounds = SplitConfig::default().bounds(1000).unwrap();
        assert_eq!(bounds.train, 0..700);
        assert_eq!(bounds.val, 700..800);
        assert_eq!(bounds.test, 800..1000);
        let (l, h) = (48, 12);
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let r = bounds.range(kind);
            for t in window_ends(r.clone(), l, h, 1).unwrap() {
                assert!(t + 1 >= r.start.max(l) || t + 1 >= l);
                assert!(t + 1 - l >= r.start.saturating_sub(l), "{kind:?} uses rows before start − L");
                assert!(t + 1 >= r.start, "{kind:?} target starts before its split");
                assert!(t + h < r.end, "{kind:?} target leaves its split");
            }
        }
    }

    #[test]
    fn rejects_bad_split_fractions() {
        let bad = SplitConfig {
            train_fraction: 0.5,
            val_fraction: 0.5,
            test_fraction: 0.5,
        };
        assert!(bad.bounds(100).is_err());
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(len in 2usize..200, l in 1usize..40, h in 1usize..40, stride in 1usize..7) {
            let n = window_ends(0..len, l, h, stride);
            if len >= l + h {
                prop_assert_eq!(n.unwrap().len(), (len - l - h) / stride + 1);
            } else {
                prop_assert!(n.is_err());
            }
        }
    }
}
