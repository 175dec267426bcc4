//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a default except `dataset.path`. Unknown keys are errors.
//! Optional values are written `auto` (derived default) or `none`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{SplitConfig, TableSchema};
use crate::decompose::{default_trend_window, DecompositionConfig};
use crate::graph::GraphConfig;
use crate::model::{Activation, AblationFlags, ModelConfig};
use crate::train_eval::{Setting, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("key {0:?} given twice")]
    Duplicate(String),
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Target channel selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetChannel {
    Last,
    Index(usize),
}

impl TargetChannel {
    pub fn resolve(self, channels: usize) -> usize {
        match self {
            TargetChannel::Last => channels.saturating_sub(1),
            TargetChannel::Index(i) => i,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_path: Option<PathBuf>,
    /// Defaults to the file stem of `dataset_path`.
    pub dataset_name: Option<String>,
    pub timestamp_column: String,
    /// Channel columns to keep; all when `None`.
    pub channels: Option<Vec<String>>,
    pub resolution_secs: Option<i64>,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub split: SplitConfig,
    pub period: usize,
    /// `None` derives the window from the period.
    pub trend_window: Option<usize>,
    pub block_window: usize,
    pub block_stride: usize,
    pub graph_k: usize,
    pub downsample: [Option<usize>; 3],
    pub dtw_band: Option<usize>,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub tcn_residual: bool,
    pub tcn_activation: Activation,
    pub gat_hidden: Option<usize>,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub setting: Setting,
    pub target_channel: TargetChannel,
    pub flags: AblationFlags,
    pub sweep_max_layers: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            dataset_name: None,
            timestamp_column: "date".into(),
            channels: None,
            resolution_secs: None,
            lookback: 336,
            horizon: 96,
            stride: 1,
            split: SplitConfig::default(),
            period: 24,
            trend_window: None,
            block_window: 3,
            block_stride: 1,
            graph_k: 3,
            downsample: [None; 3],
            dtw_band: None,
            tcn_layers: 3,
            tcn_kernel: 3,
            tcn_residual: true,
            tcn_activation: Activation::Leaky,
            gat_hidden: None,
            gat_heads: 1,
            gat_layers: 1,
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seeds: vec![0],
            setting: Setting::Mimo,
            target_channel: TargetChannel::Last,
            flags: AblationFlags::default(),
            sweep_max_layers: 4,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "dataset.path",
    "dataset.name",
    "dataset.timestamp_column",
    "dataset.channels",
    "dataset.resolution_secs",
    "window.lookback",
    "window.horizon",
    "window.stride",
    "split.train",
    "split.val",
    "split.test",
    "decompose.period",
    "decompose.trend_window",
    "decompose.block_window",
    "decompose.block_stride",
    "graph.k",
    "graph.downsample.trend",
    "graph.downsample.seasonal",
    "graph.downsample.residual",
    "graph.dtw_band",
    "model.tcn_layers",
    "model.tcn_kernel",
    "model.tcn_residual",
    "model.tcn_activation",
    "model.gat_hidden",
    "model.gat_heads",
    "model.gat_layers",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.patience",
    "train.seeds",
    "train.setting",
    "train.target_channel",
    "ablation.decomposition",
    "ablation.time_embedding",
    "ablation.temporal",
    "ablation.spatial",
    "sweep.max_layers",
    "output.dir",
];

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    match num::<usize>(key, value)? {
        0 => Err(bad(key, value, "must be positive")),
        n => Ok(n),
    }
}

fn auto(key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    match value {
        "auto" | "none" => Ok(None),
        _ => positive(key, value).map(Some),
    }
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn show_opt(v: Option<usize>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |n| n.to_string())
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset.path" => self.dataset_path = Some(PathBuf::from(value)),
            "dataset.name" => self.dataset_name = Some(value.to_string()),
            "dataset.timestamp_column" => self.timestamp_column = value.to_string(),
            "dataset.channels" => {
                self.channels = match value {
                    "all" => None,
                    _ => Some(value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
                }
            }
            "dataset.resolution_secs" => {
                self.resolution_secs = match value {
                    "auto" => None,
                    _ => match num::<i64>(key, value)? {
                        n if n > 0 => Some(n),
                        _ => return Err(bad(key, value, "must be positive")),
                    },
                }
            }
            "window.lookback" => self.lookback = positive(key, value)?,
            "window.horizon" => self.horizon = positive(key, value)?,
            "window.stride" => self.stride = positive(key, value)?,
            "split.train" => self.split.train_fraction = num(key, value)?,
            "split.val" => self.split.val_fraction = num(key, value)?,
            "split.test" => self.split.test_fraction = num(key, value)?,
            "decompose.period" => self.period = positive(key, value)?,
            "decompose.trend_window" => self.trend_window = auto(key, value)?,
            "decompose.block_window" => self.block_window = positive(key, value)?,
            "decompose.block_stride" => self.block_stride = positive(key, value)?,
            "graph.k" => self.graph_k = positive(key, value)?,
            "graph.downsample.trend" => self.downsample[0] = auto(key, value)?,
            "graph.downsample.seasonal" => self.downsample[1] = auto(key, value)?,
            "graph.downsample.residual" => self.downsample[2] = auto(key, value)?,
            "graph.dtw_band" => {
                self.dtw_band = match value {
                    "none" => None,
                    _ => Some(num(key, value)?),
                }
            }
            "model.tcn_layers" => self.tcn_layers = num(key, value)?,
            "model.tcn_kernel" => self.tcn_kernel = positive(key, value)?,
            "model.tcn_residual" => self.tcn_residual = boolean(key, value)?,
            "model.tcn_activation" => {
                self.tcn_activation = match value {
                    "leaky" => Activation::Leaky,
                    "identity" => Activation::Identity,
                    _ => return Err(bad(key, value, "expected leaky or identity")),
                }
            }
            "model.gat_hidden" => self.gat_hidden = auto(key, value)?,
            "model.gat_heads" => self.gat_heads = positive(key, value)?,
            "model.gat_layers" => self.gat_layers = positive(key, value)?,
            "train.lr" => {
                self.learning_rate = match num::<f64>(key, value)? {
                    v if v > 0.0 && v.is_finite() => v,
                    _ => return Err(bad(key, value, "must be positive")),
                }
            }
            "train.batch" => self.batch_size = positive(key, value)?,
            "train.epochs" => self.max_epochs = positive(key, value)?,
            "train.patience" => self.patience = num(key, value)?,
            "train.seeds" => {
                let seeds: Vec<u64> = value
                    .split(',')
                    .map(|s| num::<u64>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
                if seeds.is_empty() {
                    return Err(bad(key, value, "at least one seed"));
                }
                self.seeds = seeds;
            }
            "train.setting" => self.setting = value.parse().map_err(|e: crate::train_eval::TrainError| bad(key, value, e))?,
            "train.target_channel" => {
                self.target_channel = match value {
                    "last" => TargetChannel::Last,
                    _ => TargetChannel::Index(num(key, value)?),
                }
            }
            "ablation.decomposition" => self.flags.decomposition = boolean(key, value)?,
            "ablation.time_embedding" => self.flags.time_embedding = boolean(key, value)?,
            "ablation.temporal" => self.flags.temporal = boolean(key, value)?,
            "ablation.spatial" => self.flags.spatial = boolean(key, value)?,
            "sweep.max_layers" => self.sweep_max_layers = positive(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| v.to_string();
        Some(match key {
            "dataset.path" => self.dataset_path.as_ref().map_or("none".into(), |p| p.display().to_string()),
            "dataset.name" => self.dataset_name.clone().unwrap_or_else(|| "auto".into()),
            "dataset.timestamp_column" => self.timestamp_column.clone(),
            "dataset.channels" => self.channels.as_ref().map_or("all".into(), |c| c.join(",")),
            "dataset.resolution_secs" => self.resolution_secs.map_or("auto".into(), |s| s.to_string()),
            "window.lookback" => self.lookback.to_string(),
            "window.horizon" => self.horizon.to_string(),
            "window.stride" => self.stride.to_string(),
            "split.train" => self.split.train_fraction.to_string(),
            "split.val" => self.split.val_fraction.to_string(),
            "split.test" => self.split.test_fraction.to_string(),
            "decompose.period" => self.period.to_string(),
            "decompose.trend_window" => show_opt(self.trend_window, "auto"),
            "decompose.block_window" => self.block_window.to_string(),
            "decompose.block_stride" => self.block_stride.to_string(),
            "graph.k" => self.graph_k.to_string(),
            "graph.downsample.trend" => show_opt(self.downsample[0], "auto"),
            "graph.downsample.seasonal" => show_opt(self.downsample[1], "auto"),
            "graph.downsample.residual" => show_opt(self.downsample[2], "auto"),
            "graph.dtw_band" => show_opt(self.dtw_band, "none"),
            "model.tcn_layers" => self.tcn_layers.to_string(),
            "model.tcn_kernel" => self.tcn_kernel.to_string(),
            "model.tcn_residual" => b(self.tcn_residual),
            "model.tcn_activation" => match self.tcn_activation {
                Activation::Leaky => "leaky".into(),
                Activation::Identity => "identity".into(),
            },
            "model.gat_hidden" => show_opt(self.gat_hidden, "auto"),
            "model.gat_heads" => self.gat_heads.to_string(),
            "model.gat_layers" => self.gat_layers.to_string(),
            "train.lr" => self.learning_rate.to_string(),
            "train.batch" => self.batch_size.to_string(),
            "train.epochs" => self.max_epochs.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "train.setting" => self.setting.name().into(),
            "train.target_channel" => match self.target_channel {
                TargetChannel::Last => "last".into(),
                TargetChannel::Index(i) => i.to_string(),
            },
            "ablation.decomposition" => b(self.flags.decomposition),
            "ablation.time_embedding" => b(self.flags.time_embedding),
            "ablation.temporal" => b(self.flags.temporal),
            "ablation.spatial" => b(self.flags.spatial),
            "sweep.max_layers" => self.sweep_max_layers.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// The fully resolved configuration, one `key = value` line per key.
    /// Parsing the rendering yields an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("listed key");
            if (*key == "dataset.path" && v == "none") || (*key == "dataset.name" && v == "auto") {
                continue;
            }
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    /// Hex SHA-256 prefix of the rendering without `output.dir`, so that the
    /// same experiment written to two places shares a hash.
    pub fn hash(&self) -> String {
        self.hash_keys(|k| k != "output.dir")
    }

    /// Hash over the rendered lines whose key satisfies `keep`.
    pub fn hash_keys(&self, keep: impl Fn(&str) -> bool) -> String {
        let text: String = self
            .render()
            .lines()
            .filter(|l| l.split(" = ").next().is_some_and(&keep))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_path(&self) -> Result<&Path, ConfigError> {
        self.dataset_path.as_deref().ok_or(ConfigError::Missing("dataset.path"))
    }

    pub fn dataset_name(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            self.dataset_path
                .as_ref()
                .and_then(|p| p.file_stem())
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn schema(&self) -> TableSchema {
        TableSchema {
            timestamp_column: Some(self.timestamp_column.clone()),
            channels: self.channels.clone(),
            resolution_secs: self.resolution_secs,
        }
    }

    pub fn decomposition(&self) -> DecompositionConfig {
        DecompositionConfig {
            trend_window: self.trend_window.unwrap_or_else(|| default_trend_window(self.period)),
            period: self.period,
            block_window: self.block_window,
            block_stride: self.block_stride,
        }
    }

    /// Graph settings for `channels` nodes; `K` is capped at `channels − 1`.
    pub fn graph(&self, channels: usize) -> GraphConfig {
        GraphConfig {
            k: self.graph_k.min(channels.saturating_sub(1)).max(1),
            downsample: self.downsample,
            dtw_band: self.dtw_band,
        }
    }

    pub fn model(&self, channels: usize) -> ModelConfig {
        let mut m = ModelConfig::new(channels, self.lookback, self.horizon, self.decomposition());
        m.gat_hidden = self.gat_hidden;
        m.gat_heads = self.gat_heads;
        m.gat_layers = self.gat_layers;
        m.tcn_layers = self.tcn_layers;
        m.tcn_kernel = self.tcn_kernel;
        m.tcn_residual = self.tcn_residual;
        m.tcn_activation = self.tcn_activation;
        m.flags = self.flags;
        m
    }

    pub fn train(&self, seed: u64, target_channel: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            setting: self.setting,
            target_channel,
        }
    }
}
