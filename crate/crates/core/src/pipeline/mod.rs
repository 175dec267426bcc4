//! End-to-end stages backed by files under the output directory.
//!
//! Each stage reads the artifacts of the stages before it and fails with the
//! missing file's path when one is absent. Text artifacts start with a
//! `# config_hash=…` line; JSON artifacts carry `config_hash` and the
//! rendered configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{
    impute_missing, load_table, make_time_features, read_table, window_ends, write_table, DataError,
    NormalizationStats, SplitBounds, SplitKind, TableSchema, TimeSeriesTable, WindowSample,
};
use crate::decompose::{decompose, ComponentKind, Components, DecomposeError};
use crate::diff::DiffError;
use crate::graph::{
    build_component_graphs, build_raw_graph, read_edge_list, write_adjacency_csv, write_distance_csv,
    write_edge_list, ComponentGraph, DistanceMatrix, GraphError,
};
use crate::model::{AblationFlags, DstModel, ModelConfig, ModelError, ParamSet};
use crate::train_eval::{
    ablate, evaluate, format_summary, layer_sweep, train, write_history, AblationRow, EvalReport, Setting,
    SweepPoint, TableWindows, TrainError, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {path}; run `{command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },
    #[error("artifact {path} was produced by settings {found}, current settings are {expected}; rerun `{command}`")]
    StaleArtifact {
        path: PathBuf,
        found: String,
        expected: String,
        command: &'static str,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl PipelineError {
    /// Stable, machine-parseable error class.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::MissingArtifact { .. } => "missing-artifact",
            PipelineError::StaleArtifact { .. } => "stale-artifact",
            PipelineError::Io { .. } => "io",
            PipelineError::Json { .. } => "artifact-format",
            PipelineError::Invalid(_) => "invalid-experiment",
            PipelineError::Config(ConfigError::UnknownKey(_)) => "unknown-config-key",
            PipelineError::Config(ConfigError::Missing(_)) => "missing-config-key",
            PipelineError::Config(_) => "config",
            PipelineError::Data(_) => "data",
            PipelineError::Decompose(_) => "decompose",
            PipelineError::Graph(_) => "graph",
            PipelineError::Model(_) => "model",
            PipelineError::Train(_) => "train",
            PipelineError::Diff(_) => "numeric",
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Deterministic artifact names under one output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub root: PathBuf,
}

/// Name of the graph used by models without decomposition.
pub const RAW_GRAPH: &str = "raw";

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.at("config.txt")
    }
    pub fn data(&self) -> PathBuf {
        self.at("data.csv")
    }
    pub fn ingest_manifest(&self) -> PathBuf {
        self.at("ingest.json")
    }
    pub fn component(&self, kind: ComponentKind) -> PathBuf {
        self.at(format!("component_{kind}.csv"))
    }
    /// `graph` is a component name or [`RAW_GRAPH`].
    pub fn edges(&self, graph: &str) -> PathBuf {
        self.at(format!("graph_{graph}.edges"))
    }
    pub fn adjacency(&self, graph: &str) -> PathBuf {
        self.at(format!("adjacency_{graph}.csv"))
    }
    pub fn distance(&self, graph: &str) -> PathBuf {
        self.at(format!("distance_{graph}.csv"))
    }
    pub fn graph_manifest(&self) -> PathBuf {
        self.at("graph.json")
    }
    pub fn params(&self, seed: u64) -> PathBuf {
        self.at(format!("model_seed{seed}.bin"))
    }
    pub fn model_manifest(&self, seed: u64) -> PathBuf {
        self.at(format!("model_seed{seed}.json"))
    }
    pub fn history(&self, seed: u64) -> PathBuf {
        self.at(format!("history_seed{seed}.csv"))
    }
    pub fn report(&self) -> PathBuf {
        self.at("report.jsonl")
    }
    pub fn summary(&self) -> PathBuf {
        self.at("summary.txt")
    }
    pub fn ablation(&self) -> PathBuf {
        self.at("ablation.jsonl")
    }
    pub fn ablation_table(&self) -> PathBuf {
        self.at("ablation.csv")
    }
    pub fn sweep(&self) -> PathBuf {
        self.at("layer_sweep.jsonl")
    }
    pub fn sweep_table(&self) -> PathBuf {
        self.at("layer_sweep.csv")
    }
    pub fn forecast(&self) -> PathBuf {
        self.at("forecast.csv")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Writes a text artifact prefixed with the config hash line.
fn write_text<F>(path: &Path, hash: &str, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut out = create(path)?;
    writeln!(out, "# config_hash={hash}").map_err(io_err(path))?;
    body(&mut out)?;
    out.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, command: &'static str) -> Result<T> {
    require(path, command)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Config keys each stage's artifacts depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Ingest,
    Graph,
    Model,
}

impl Stage {
    fn depends_on(self, key: &str) -> bool {
        let ingest = key.starts_with("dataset.") || key.starts_with("split.");
        match self {
            Stage::Ingest => ingest,
            Stage::Graph => ingest || key.starts_with("decompose.") || key.starts_with("graph."),
            Stage::Model => !matches!(key, "output.dir" | "train.seeds") && !key.starts_with("sweep."),
        }
    }

    fn hash(self, cfg: &ExperimentConfig) -> String {
        cfg.hash_keys(|k| self.depends_on(k))
    }
}

fn check_hash(path: &Path, found: &str, cfg: &ExperimentConfig, stage: Stage, command: &'static str) -> Result<()> {
    let expected = stage.hash(cfg);
    if found == expected {
        Ok(())
    } else {
        Err(PipelineError::StaleArtifact {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected,
            command,
        })
    }
}

/// Echoes the resolved configuration into `config.txt`.
pub fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    let path = Artifacts::new(&cfg.output_dir).config();
    let mut out = create(&path)?;
    write!(out, "# config_hash={}\n{}", cfg.hash(), cfg.render()).map_err(io_err(&path))?;
    out.flush().map_err(io_err(&path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub config_hash: String,
    /// Hash of the keys this artifact depends on.
    pub stage_hash: String,
    pub config: String,
    pub dataset: String,
    pub rows: usize,
    pub step_secs: i64,
    pub imputed: usize,
    pub splits: SplitBounds,
    pub stats: NormalizationStats,
    pub channel_names: Vec<String>,
}

/// A standardized table with its calendar features, splits and statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Imputed and standardized with training-split statistics.
    pub table: TimeSeriesTable,
    /// `F × T`.
    pub time_features: Array2<f64>,
    pub stats: NormalizationStats,
    pub splits: SplitBounds,
}

impl Dataset {
    /// Imputes, splits and standardizes a raw table.
    pub fn prepare(name: &str, raw: &TimeSeriesTable, cfg: &ExperimentConfig) -> Result<Self> {
        let table = impute_missing(raw);
        let splits = cfg.split.bounds(table.len())?;
        let stats = NormalizationStats::fit(&table, splits.train.clone())?;
        let table = stats.standardize(&table)?;
        let time_features = make_time_features(&table.timestamps);
        Ok(Self {
            name: name.to_string(),
            table,
            time_features,
            stats,
            splits,
        })
    }

    pub fn channels(&self) -> usize {
        self.table.channels()
    }

    /// Stride-spaced windows whose targets lie inside split `kind`.
    pub fn windows(&self, kind: SplitKind, lookback: usize, horizon: usize, stride: usize) -> Result<TableWindows<'_>> {
        let ends = window_ends(self.splits.range(kind), lookback, horizon, stride)
            .map_err(|e| PipelineError::Invalid(format!("{kind:?} split: {e}")))?;
        Ok(TableWindows {
            table: &self.table,
            time_features: &self.time_features,
            ends,
            lookback,
            horizon,
        })
    }

    /// The same data restricted to `channels`.
    pub fn select(&self, channels: &[usize]) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            table: self.table.select_channels(channels)?,
            time_features: self.time_features.clone(),
            stats: self.stats.select(channels),
            splits: self.splits.clone(),
        })
    }
}

/// `ingest`: load, impute, split and standardize; writes `data.csv` and
/// `ingest.json`.
pub fn ingest(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.dataset_path()?;
    if !path.is_file() {
        return Err(PipelineError::Invalid(format!("dataset file {} does not exist", path.display())));
    }
    let raw = load_table(path, &cfg.schema())?;
    let ds = Dataset::prepare(&cfg.dataset_name(), &raw, cfg)?;
    let paths = Artifacts::new(&cfg.output_dir);
    let hash = cfg.hash();
    write_config(cfg)?;
    write_text(&paths.data(), &hash, |out| Ok(write_table(out, &ds.table)?))?;
    write_json(
        &paths.ingest_manifest(),
        &IngestManifest {
            config_hash: hash,
            stage_hash: Stage::Ingest.hash(cfg),
            config: cfg.render(),
            dataset: ds.name.clone(),
            rows: ds.table.len(),
            step_secs: ds.table.step.num_seconds(),
            imputed: raw.missing_count(),
            splits: ds.splits.clone(),
            stats: ds.stats.clone(),
            channel_names: ds.table.channel_names.clone(),
        },
    )?;
    Ok(ds)
}

/// Reads the `ingest` artifacts back.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let paths = Artifacts::new(&cfg.output_dir);
    let manifest: IngestManifest = read_json(&paths.ingest_manifest(), "ingest")?;
    check_hash(&paths.ingest_manifest(), &manifest.stage_hash, cfg, Stage::Ingest, "ingest")?;
    let data = paths.data();
    require(&data, "ingest")?;
    let schema = TableSchema {
        timestamp_column: Some("date".into()),
        channels: None,
        resolution_secs: Some(manifest.step_secs),
    };
    let table = read_table(File::open(&data).map_err(io_err(&data))?, &schema)?;
    let time_features = make_time_features(&table.timestamps);
    Ok(Dataset {
        name: manifest.dataset,
        table,
        time_features,
        stats: manifest.stats,
        splits: manifest.splits,
    })
}

/// `decompose`: splits every channel of the whole standardized table into
/// trend, seasonal and residual tables and writes one file per component.
pub fn decompose_stage(cfg: &ExperimentConfig) -> Result<Components<TimeSeriesTable>> {
    let ds = load_dataset(cfg)?;
    let parts = decompose(ds.table.values.t(), &cfg.decomposition())?;
    let as_table = |m: &Array2<f64>| -> Result<TimeSeriesTable> {
        Ok(TimeSeriesTable::new(
            ds.table.timestamps.clone(),
            m.t().to_owned(),
            ds.table.channel_names.clone(),
            ds.table.step,
        )?)
    };
    let out = Components {
        trend: as_table(&parts.trend)?,
        seasonal: as_table(&parts.seasonal)?,
        residual: as_table(&parts.residual)?,
    };
    let paths = Artifacts::new(&cfg.output_dir);
    let hash = cfg.hash();
    for kind in ComponentKind::ALL {
        write_text(&paths.component(kind), &hash, |w| Ok(write_table(w, out.get(kind))?))?;
    }
    Ok(out)
}

/// Component graphs plus the graph over undecomposed series.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub components: Components<ComponentGraph>,
    pub raw: ComponentGraph,
}

impl GraphSet {
    /// Self-loop-only graphs on `nodes` nodes.
    pub fn empty(nodes: usize) -> Self {
        Self {
            components: Components {
                trend: ComponentGraph::empty(nodes, ComponentKind::Trend),
                seasonal: ComponentGraph::empty(nodes, ComponentKind::Seasonal),
                residual: ComponentGraph::empty(nodes, ComponentKind::Residual),
            },
            raw: ComponentGraph::empty(nodes, ComponentKind::Trend),
        }
    }

    /// Graphs in model slot order for the given flags.
    pub fn for_model(&self, flags: AblationFlags) -> Vec<ComponentGraph> {
        if flags.decomposition {
            ComponentKind::ALL.iter().map(|&k| self.components.get(k).clone()).collect()
        } else {
            vec![self.raw.clone()]
        }
    }

    fn named(&self) -> Vec<(&'static str, &ComponentGraph)> {
        let mut v: Vec<(&'static str, &ComponentGraph)> =
            ComponentKind::ALL.iter().map(|&k| (k.name(), self.components.get(k))).collect();
        v.push((RAW_GRAPH, &self.raw));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub config_hash: String,
    /// Hash of the keys this artifact depends on.
    pub stage_hash: String,
    pub config: String,
    pub nodes: usize,
    /// `K` after capping at `nodes − 1`.
    pub k: usize,
    pub downsample: [usize; 3],
}

/// Infers every graph from the training rows of `ds`.
pub fn infer_graphs(ds: &Dataset, cfg: &ExperimentConfig) -> Result<(GraphSet, Vec<(&'static str, DistanceMatrix)>)> {
    let train = ds.table.values.slice(s![ds.splits.train.clone(), ..]);
    let gcfg = cfg.graph(ds.channels());
    let decomposition = cfg.decomposition();
    let built = build_component_graphs(train, &decomposition, &gcfg)?;
    let (raw, raw_dist) = build_raw_graph(train, decomposition.period, &gcfg)?;
    let mut dists: Vec<(&'static str, DistanceMatrix)> = ComponentKind::ALL
        .iter()
        .map(|&k| (k.name(), built.distances.get(k).clone()))
        .collect();
    dists.push((RAW_GRAPH, raw_dist));
    Ok((
        GraphSet {
            components: built.graphs,
            raw,
        },
        dists,
    ))
}

/// `build-graph`: writes edge lists, adjacency and normalized distance
/// matrices for the three components and the raw series.
pub fn build_graph_stage(cfg: &ExperimentConfig) -> Result<GraphSet> {
    let ds = load_dataset(cfg)?;
    let (graphs, dists) = infer_graphs(&ds, cfg)?;
    let paths = Artifacts::new(&cfg.output_dir);
    let hash = cfg.hash();
    let names = &ds.table.channel_names;
    for (name, g) in graphs.named() {
        write_text(&paths.edges(name), &hash, |w| Ok(write_edge_list(w, g)?))?;
        write_text(&paths.adjacency(name), &hash, |w| Ok(write_adjacency_csv(w, names, g)?))?;
    }
    for (name, d) in &dists {
        write_text(&paths.distance(name), &hash, |w| Ok(write_distance_csv(w, names, d)?))?;
    }
    let period = cfg.period;
    let gcfg = cfg.graph(ds.channels());
    write_json(
        &paths.graph_manifest(),
        &GraphManifest {
            config_hash: hash,
            stage_hash: Stage::Graph.hash(cfg),
            config: cfg.render(),
            nodes: ds.channels(),
            k: gcfg.k,
            downsample: ComponentKind::ALL.map(|k| gcfg.factor(k, period)),
        },
    )?;
    Ok(graphs)
}

pub fn load_graphs(cfg: &ExperimentConfig, nodes: usize) -> Result<GraphSet> {
    let paths = Artifacts::new(&cfg.output_dir);
    let manifest: GraphManifest = read_json(&paths.graph_manifest(), "build-graph")?;
    check_hash(&paths.graph_manifest(), &manifest.stage_hash, cfg, Stage::Graph, "build-graph")?;
    let read = |name: &str, kind: ComponentKind| -> Result<ComponentGraph> {
        let path = paths.edges(name);
        require(&path, "build-graph")?;
        Ok(read_edge_list(File::open(&path).map_err(io_err(&path))?, nodes, kind)?)
    };
    Ok(GraphSet {
        components: Components {
            trend: read("trend", ComponentKind::Trend)?,
            seasonal: read("seasonal", ComponentKind::Seasonal)?,
            residual: read("residual", ComponentKind::Residual)?,
        },
        raw: read(RAW_GRAPH, ComponentKind::Trend)?,
    })
}

/// Channel arrangement of one run after applying the setting.
struct Arranged {
    data: Dataset,
    graphs: GraphSet,
    /// Target channel index within `data`.
    target: usize,
}

fn arrange(ds: &Dataset, graphs: &GraphSet, cfg: &ExperimentConfig) -> Result<Arranged> {
    let d = ds.channels();
    let target = cfg.target_channel.resolve(d);
    if cfg.setting != Setting::Mimo && target >= d {
        return Err(TrainError::InvalidTargetChannel { channel: target, channels: d }.into());
    }
    Ok(match cfg.setting {
        Setting::Siso => Arranged {
            data: ds.select(&[target])?,
            graphs: GraphSet::empty(1),
            target: 0,
        },
        _ => Arranged {
            data: ds.clone(),
            graphs: graphs.clone(),
            target,
        },
    })
}

/// Training and validation windows; validation is empty when its split is.
fn fit_windows<'a>(data: &'a Dataset, cfg: &ExperimentConfig) -> Result<(TableWindows<'a>, TableWindows<'a>)> {
    let tr = data.windows(SplitKind::Train, cfg.lookback, cfg.horizon, cfg.stride)?;
    let va = if data.splits.val.is_empty() {
        TableWindows { ends: Vec::new(), ..tr.clone() }
    } else {
        data.windows(SplitKind::Val, cfg.lookback, cfg.horizon, cfg.stride)?
    };
    Ok((tr, va))
}

/// One trained model and its test-split evaluation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains on the training split and evaluates on the test split, entirely
/// in memory. `model_cfg` overrides the configuration's model section.
pub fn run_once(
    ds: &Dataset,
    graphs: &GraphSet,
    cfg: &ExperimentConfig,
    model_cfg: Option<&ModelConfig>,
    seed: u64,
) -> Result<RunResult> {
    let a = arrange(ds, graphs, cfg)?;
    let mcfg = match model_cfg {
        Some(m) => ModelConfig {
            channels: a.data.channels(),
            ..m.clone()
        },
        None => cfg.model(a.data.channels()),
    };
    let model = DstModel::new(mcfg.clone(), &a.graphs.for_model(mcfg.flags), seed)?;
    let (tr, va) = fit_windows(&a.data, cfg)?;
    let te = a.data.windows(SplitKind::Test, cfg.lookback, cfg.horizon, cfg.stride)?;
    let outcome = train(model, &tr, &va, &cfg.train(seed, a.target))?;
    let eval = evaluate(&outcome.model, &te, cfg.setting, a.target)?;
    let report = EvalReport::new(&eval, &ds.name, seed, &cfg.hash());
    Ok(RunResult { outcome, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config_hash: String,
    /// Hash of the keys this artifact depends on.
    pub stage_hash: String,
    pub config: String,
    pub seed: u64,
    pub setting: Setting,
    /// Target channel index in the ingested table.
    pub target_channel: usize,
    pub model: ModelConfig,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub diverged: bool,
}

/// `train`: one model per configured seed; writes parameters, a manifest
/// and the loss history for each.
pub fn train_stage(cfg: &ExperimentConfig) -> Result<Vec<TrainOutcome>> {
    let ds = load_dataset(cfg)?;
    let graphs = load_graphs(cfg, ds.channels())?;
    let a = arrange(&ds, &graphs, cfg)?;
    let paths = Artifacts::new(&cfg.output_dir);
    let hash = cfg.hash();
    let (tr, va) = fit_windows(&a.data, cfg)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let mcfg = cfg.model(a.data.channels());
        let model = DstModel::new(mcfg.clone(), &a.graphs.for_model(mcfg.flags), seed)?;
        let out = train(model, &tr, &va, &cfg.train(seed, a.target))?;
        let params_path = paths.params(seed);
        let mut w = create(&params_path)?;
        out.model.params.write(&mut w)?;
        w.flush().map_err(io_err(&params_path))?;
        write_json(
            &paths.model_manifest(seed),
            &ModelManifest {
                config_hash: hash.clone(),
                stage_hash: Stage::Model.hash(cfg),
                config: cfg.render(),
                seed,
                setting: cfg.setting,
                target_channel: cfg.target_channel.resolve(ds.channels()),
                model: mcfg,
                best_epoch: out.best_epoch,
                best_val_loss: out.best_val_loss.is_finite().then_some(out.best_val_loss),
                epochs_run: out.epochs.len(),
                steps: out.history.len(),
                stopped_early: out.stopped_early,
                diverged: out.diverged,
            },
        )?;
        write_text(&paths.history(seed), &hash, |w| {
            write_history(&mut *w, &out.history).map_err(io_err(&paths.history(seed)))
        })?;
        outcomes.push(out);
    }
    Ok(outcomes)
}

fn load_model(cfg: &ExperimentConfig, graphs: &GraphSet, seed: u64) -> Result<DstModel> {
    let paths = Artifacts::new(&cfg.output_dir);
    let manifest: ModelManifest = read_json(&paths.model_manifest(seed), "train")?;
    check_hash(&paths.model_manifest(seed), &manifest.stage_hash, cfg, Stage::Model, "train")?;
    let path = paths.params(seed);
    require(&path, "train")?;
    let params = ParamSet::read(File::open(&path).map_err(io_err(&path))?)?;
    Ok(DstModel::with_params(
        manifest.model.clone(),
        &graphs.for_model(manifest.model.flags),
        params,
    )?)
}

/// `evaluate`: scores each trained seed on the test split; writes
/// `report.jsonl` and `summary.txt`.
pub fn evaluate_stage(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    let ds = load_dataset(cfg)?;
    let graphs = load_graphs(cfg, ds.channels())?;
    let a = arrange(&ds, &graphs, cfg)?;
    let te = a.data.windows(SplitKind::Test, cfg.lookback, cfg.horizon, cfg.stride)?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let model = load_model(cfg, &a.graphs, seed)?;
        let eval = evaluate(&model, &te, cfg.setting, a.target)?;
        reports.push(EvalReport::new(&eval, &ds.name, seed, &cfg.hash()));
    }
    write_reports(cfg, &reports)?;
    Ok(reports)
}

fn write_reports(cfg: &ExperimentConfig, reports: &[EvalReport]) -> Result<()> {
    let paths = Artifacts::new(&cfg.output_dir);
    let path = paths.report();
    let mut out = create(&path)?;
    for r in reports {
        writeln!(out, "{}", r.to_json_line()).map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;
    let summary = format_summary(reports);
    write_text(&paths.summary(), &cfg.hash(), |w| w.write_all(summary.as_bytes()).map_err(io_err(&paths.summary())))
}

/// `ablate`: the five single-module variants for every seed.
pub fn ablate_stage(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let ds = load_dataset(cfg)?;
    let graphs = load_graphs(cfg, ds.channels())?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(ablation_rows(&ds, &graphs, cfg, seed)?);
    }
    let paths = Artifacts::new(&cfg.output_dir);
    let path = paths.ablation();
    let mut out = create(&path)?;
    for r in &rows {
        let line = serde_json::to_string(r).expect("row serializes");
        writeln!(out, "{line}").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;
    write_text(&paths.ablation_table(), &cfg.hash(), |w| {
        let p = paths.ablation_table();
        writeln!(w, "variant,seed,mse,mae").map_err(io_err(&p))?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.variant, r.report.seed, r.report.mse, r.report.mae).map_err(io_err(&p))?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// The five ablation runs of one seed, in memory.
pub fn ablation_rows(ds: &Dataset, graphs: &GraphSet, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<AblationRow>> {
    ablate(cfg.flags, |_, flags| {
        let mut m = cfg.model(ds.channels());
        m.flags = flags;
        run_once(ds, graphs, cfg, Some(&m), seed).map(|r| r.report)
    })
}

/// `sweep-layers`: one run per GATv2 depth `1..=sweep.max_layers`, first
/// seed only.
pub fn sweep_stage(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let ds = load_dataset(cfg)?;
    let graphs = load_graphs(cfg, ds.channels())?;
    let seed = cfg.seeds[0];
    let points = layer_sweep(cfg.sweep_max_layers, |layers| {
        let mut m = cfg.model(ds.channels());
        m.gat_layers = layers;
        run_once(&ds, &graphs, cfg, Some(&m), seed).map(|r| r.report)
    })?;
    let paths = Artifacts::new(&cfg.output_dir);
    let path = paths.sweep();
    let mut out = create(&path)?;
    for p in &points {
        writeln!(out, "{}", serde_json::to_string(p).expect("point serializes")).map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;
    write_text(&paths.sweep_table(), &cfg.hash(), |w| {
        let p = paths.sweep_table();
        writeln!(w, "layers,mse").map_err(io_err(&p))?;
        for pt in &points {
            writeln!(w, "{},{}", pt.layers, pt.report.mse).map_err(io_err(&p))?;
        }
        Ok(())
    })?;
    Ok(points)
}

/// `forecast`: predicts the `H` steps after the end of the table with the
/// first seed's model and writes them in raw units.
pub fn forecast_stage(cfg: &ExperimentConfig) -> Result<TimeSeriesTable> {
    let ds = load_dataset(cfg)?;
    let graphs = load_graphs(cfg, ds.channels())?;
    let a = arrange(&ds, &graphs, cfg)?;
    let model = load_model(cfg, &a.graphs, cfg.seeds[0])?;
    let (l, h) = (model.config.lookback, model.config.horizon);
    let t = a.data.table.len();
    if t < l {
        return Err(PipelineError::Invalid(format!("table has {t} rows, look-back needs {l}")));
    }
    let step = a.data.table.step;
    let last = *a.data.table.timestamps.last().expect("nonempty table");
    let future: Vec<_> = (1..=h).map(|i| last + step * i as i32).collect();
    let sample = WindowSample {
        lookback: a.data.table.values.slice(s![t - l.., ..]).t().to_owned(),
        target: Array2::zeros((a.data.channels(), h)),
        time_features: a.data.time_features.slice(s![.., t - l..]).to_owned(),
        target_time_features: make_time_features(&future),
        t_end: t - 1,
    };
    let pred = model.predict_one(&sample)?;
    let raw = a.data.stats.destandardize_rows(&pred)?;
    let table = TimeSeriesTable::new(future, raw.t().to_owned(), a.data.table.channel_names.clone(), step)?;
    let path = Artifacts::new(&cfg.output_dir).forecast();
    write_text(&path, &cfg.hash(), |w| Ok(write_table(w, &table)?))?;
    Ok(table)
}

/// Every stage in order: ingest, build-graph, train, evaluate.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    ingest(cfg)?;
    build_graph_stage(cfg)?;
    train_stage(cfg)?;
    evaluate_stage(cfg)
}

#[cfg(test)]
mod tests;
