//! Seeded toy datasets used by tests, the acceptance suite, and `dst ingest --synthetic`.

use chrono::{NaiveDate, TimeDelta};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TimeSeriesTable;

/// Two hourly sinusoid channels; channel 1 follows channel 0 with a lag and
/// carries an extra half-day harmonic.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSinusoids {
    pub len: usize,
    pub period: f64,
    pub slow_period: f64,
    pub lag: usize,
    pub coupling: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CoupledSinusoids {
    fn default() -> Self {
        Self {
            len: 5000,
            period: 24.0,
            slow_period: 168.0,
            lag: 6,
            coupling: 0.8,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl CoupledSinusoids {
    fn driver(&self, t: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        (tau * t / self.period).sin() + 0.5 * (tau * t / self.slow_period).sin()
    }

    pub fn generate(&self) -> TimeSeriesTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).expect("noise std must be finite and nonnegative");
        let tau = std::f64::consts::TAU;
        let mut values = Array2::zeros((self.len, 2));
        for t in 0..self.len {
            let tf = t as f64;
            let lead = self.driver(tf);
            let lagged = self.driver(tf - self.lag as f64);
            values[[t, 0]] = lead + noise.sample(&mut rng);
            values[[t, 1]] =
                self.coupling * lagged + 0.4 * (tau * tf / (self.period / 2.0)).cos() + noise.sample(&mut rng);
        }
        hourly_table(values, vec!["x0".into(), "x1".into()])
    }
}

/// Wraps a `T × D` matrix as an hourly table starting 2020-01-01 00:00.
pub fn hourly_table(values: Array2<f64>, channel_names: Vec<String>) -> TimeSeriesTable {
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let timestamps = (0..values.nrows()).map(|i| start + TimeDelta::hours(i as i64)).collect();
    TimeSeriesTable::new(timestamps, values, channel_names, TimeDelta::hours(1)).expect("hourly grid is valid")
}
