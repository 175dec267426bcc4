//! Optimizer, training loop, metrics, the Repeat-Last baseline, the three
//! evaluation settings and the ablation / depth-sweep harness.

mod ablation;
mod optim;
mod report;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_at, DataError, TimeSeriesTable, WindowSample};
use crate::model::{DstModel, ModelError, ParamSet};

pub use ablation::{ablate, layer_sweep, AblationRow, AblationVariant, SweepPoint};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use report::{format_summary, write_history, EvalReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split has no samples")]
    EmptyTrainingSplit,
    #[error("target channel {channel} out of range for {channels} channels")]
    InvalidTargetChannel { channel: usize, channels: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Mean squared error over all entries.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64, TrainError> {
    let (sum, n) = error_sums(pred, target, |e| e * e)?;
    Ok(sum / n as f64)
}

/// Mean absolute error over all entries.
pub fn mae(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64, TrainError> {
    let (sum, n) = error_sums(pred, target, f64::abs)?;
    Ok(sum / n as f64)
}

fn error_sums(pred: ArrayView2<f64>, target: ArrayView2<f64>, f: impl Fn(f64) -> f64) -> Result<(f64, usize), TrainError> {
    if pred.dim() != target.dim() || pred.is_empty() {
        return Err(TrainError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let sum = pred.iter().zip(target.iter()).map(|(p, t)| f(p - t)).sum();
    Ok((sum, pred.len()))
}

/// Forecasts every horizon step of each channel as its last look-back value.
pub fn repeat_last(sample: &WindowSample) -> Array2<f64> {
    let last = sample.lookback.index_axis(Axis(1), sample.lookback_len() - 1);
    let mut out = Array2::zeros((sample.channels(), sample.horizon()));
    for (mut row, v) in out.rows_mut().into_iter().zip(last.iter()) {
        row.fill(*v);
    }
    out
}

/// Input/output channel arrangement of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Setting {
    /// All channels in, all channels scored.
    Mimo,
    /// All channels in, only the target channel scored.
    Miso,
    /// Only the target channel in and out.
    Siso,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Mimo => "MIMO",
            Setting::Miso => "MISO",
            Setting::Siso => "SISO",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MIMO" => Ok(Setting::Mimo),
            "MISO" => Ok(Setting::Miso),
            "SISO" => Ok(Setting::Siso),
            _ => Err(TrainError::Config(format!("unknown setting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub setting: Setting,
    /// Channel scored under MISO and kept under SISO.
    pub target_channel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            setting: Setting::Mimo,
            target_channel: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config("patience must not exceed max_epochs".into()));
        }
        Ok(())
    }

    /// Output channel the loss and metrics are restricted to, if any, for a
    /// model with `channels` outputs.
    pub fn scored_channel(&self, channels: usize) -> Result<Option<usize>, TrainError> {
        scored_channel(self.setting, self.target_channel, channels)
    }
}

fn scored_channel(setting: Setting, target: usize, channels: usize) -> Result<Option<usize>, TrainError> {
    match setting {
        Setting::Mimo => Ok(None),
        Setting::Miso if target < channels => Ok(Some(target)),
        Setting::Miso => Err(TrainError::InvalidTargetChannel { channel: target, channels }),
        Setting::Siso if channels == 1 => Ok(None),
        Setting::Siso => Err(TrainError::Shape(format!(
            "SISO expects single-channel samples, got {channels} channels"
        ))),
    }
}

/// Indexed access to windows without materializing all of them.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, i: usize) -> Result<WindowSample, TrainError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [WindowSample] {
    fn len(&self) -> usize {
        <[WindowSample]>::len(self)
    }

    fn sample(&self, i: usize) -> Result<WindowSample, TrainError> {
        Ok(self[i].clone())
    }
}

impl SampleSource for Vec<WindowSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, i: usize) -> Result<WindowSample, TrainError> {
        Ok(self[i].clone())
    }
}

/// Windows of one table, cut on demand at the given look-back end rows.
#[derive(Debug, Clone)]
pub struct TableWindows<'a> {
    pub table: &'a TimeSeriesTable,
    /// `F × T` calendar features of `table`.
    pub time_features: &'a Array2<f64>,
    pub ends: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl SampleSource for TableWindows<'_> {
    fn len(&self) -> usize {
        self.ends.len()
    }

    fn sample(&self, i: usize) -> Result<WindowSample, TrainError> {
        Ok(sample_at(self.table, self.time_features, self.ends[i], self.lookback, self.horizon)?)
    }
}

/// Anything that maps windows to `D × H` forecasts.
pub trait Forecaster: Sync {
    fn forecast(&self, samples: &[&WindowSample]) -> Result<Vec<Array2<f64>>, TrainError>;
}

impl Forecaster for DstModel {
    fn forecast(&self, samples: &[&WindowSample]) -> Result<Vec<Array2<f64>>, TrainError> {
        Ok(self.predict(samples, PREDICT_CHUNK)?)
    }
}

/// The Repeat-Last baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct RepeatLast;

impl Forecaster for RepeatLast {
    fn forecast(&self, samples: &[&WindowSample]) -> Result<Vec<Array2<f64>>, TrainError> {
        Ok(samples.iter().map(|s| repeat_last(s)).collect())
    }
}

const PREDICT_CHUNK: usize = 64;
const EVAL_BLOCK: usize = 512;

/// Running error sums over a set of windows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ErrorSums {
    sq: f64,
    abs: f64,
    n: usize,
}

impl ErrorSums {
    fn add(&mut self, pred: &Array2<f64>, target: &Array2<f64>, channel: Option<usize>) -> Result<(), TrainError> {
        let (p, t) = match channel {
            Some(c) => (pred.slice(ndarray::s![c..=c, ..]), target.slice(ndarray::s![c..=c, ..])),
            None => (pred.view(), target.view()),
        };
        let (sq, n) = error_sums(p, t, |e| e * e)?;
        let (abs, _) = error_sums(p, t, f64::abs)?;
        self.sq += sq;
        self.abs += abs;
        self.n += n;
        Ok(())
    }

    fn mse(&self) -> f64 {
        self.sq / self.n as f64
    }

    fn mae(&self) -> f64 {
        self.abs / self.n as f64
    }
}

/// Model and Repeat-Last sums accumulated in sample order.
fn accumulate(
    forecaster: &dyn Forecaster,
    samples: &dyn SampleSource,
    channel: Option<usize>,
    with_baseline: bool,
) -> Result<(ErrorSums, ErrorSums), TrainError> {
    let mut model = ErrorSums::default();
    let mut base = ErrorSums::default();
    let mut start = 0;
    while start < samples.len() {
        let stop = (start + EVAL_BLOCK).min(samples.len());
        let block: Vec<WindowSample> = (start..stop).map(|i| samples.sample(i)).collect::<Result<_, _>>()?;
        let refs: Vec<&WindowSample> = block.iter().collect();
        let preds = forecaster.forecast(&refs)?;
        for (s, p) in block.iter().zip(&preds) {
            model.add(p, &s.target, channel)?;
            if with_baseline {
                base.add(&repeat_last(s), &s.target, channel)?;
            }
        }
        start = stop;
    }
    Ok((model, base))
}

/// Averaged metrics of a forecaster and of Repeat-Last on the same windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub setting: Setting,
    pub horizon: usize,
    pub samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

/// Scores `forecaster` on `samples` under `setting`.
///
/// MISO scores only `target_channel`; SISO expects single-channel samples
/// (the target channel already selected).
pub fn evaluate(
    forecaster: &dyn Forecaster,
    samples: &dyn SampleSource,
    setting: Setting,
    target_channel: usize,
) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Shape("no samples to evaluate".into()));
    }
    let first = samples.sample(0)?;
    let channel = scored_channel(setting, target_channel, first.channels())?;
    let (model, base) = accumulate(forecaster, samples, channel, true)?;
    Ok(Evaluation {
        setting,
        horizon: first.horizon(),
        samples: samples.len(),
        mse: model.mse(),
        mae: model.mae(),
        baseline_mse: base.mse(),
        baseline_mae: base.mae(),
    })
}

/// Percentage error reduction relative to the baseline.
pub fn improvement(baseline: f64, model: f64) -> f64 {
    if baseline == 0.0 {
        if model == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (baseline - model) / baseline * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model with the best-validation parameters.
    pub model: DstModel,
    /// `(step, minibatch loss)` for every optimizer step.
    pub history: Vec<(usize, f64)>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint; `None` if training diverged before
    /// the first epoch finished and the initial parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub diverged: bool,
}

/// Minimizes MSE on `train` with Adam, early-stopping on the MSE over `val`
/// (the training loss when `val` is empty).
///
/// Sample order is reshuffled each epoch by a generator seeded from
/// `config.seed`, so a run is fully determined by the model, data and config.
/// A non-finite loss or parameter stops training; the last checkpoint (best
/// validation so far, else the initial parameters) is returned with
/// `diverged` set.
pub fn train(
    mut model: DstModel,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    let channel = config.scored_channel(model.config.channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let adam = AdamConfig::default();
    let mut state = AdamState::new(&model.params.tensors);

    let mut checkpoint: ParamSet = model.params.clone();
    let mut best: Option<(usize, f64)> = None;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut waited = 0;
    let mut stopped_early = false;
    let mut diverged = false;
    let mut step = 0;

    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let block: Vec<WindowSample> = idx.iter().map(|&i| train.sample(i)).collect::<Result<_, _>>()?;
            let refs: Vec<&WindowSample> = block.iter().collect();
            let batch = model.batch(&refs)?;
            let (loss, grads) = model.loss_and_grads(&batch, channel)?;
            if !loss.is_finite() || !grads.iter().all(|g| g.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            history.push((step, loss));
            adam_step(&mut model.params.tensors, &grads, &mut state, config.learning_rate, &adam);
            step += 1;
            loss_sum += loss * idx.len() as f64;
            if !model.params.is_finite() {
                diverged = true;
                break 'epochs;
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            accumulate(&model, val, channel, false)?.0.mse()
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
        if best.is_none_or(|(_, b)| val_loss < b) {
            best = Some((epoch, val_loss));
            checkpoint = model.params.clone();
            waited = 0;
        } else {
            waited += 1;
            if waited >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.params = checkpoint;
    Ok(TrainOutcome {
        model,
        history,
        epochs,
        best_epoch: best.map(|(e, _)| e),
        best_val_loss: best.map_or(f64::NAN, |(_, v)| v),
        stopped_early,
        diverged,
    })
}

#[cfg(test)]
mod tests;
