use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::*;
use crate::data::synthetic::{hourly_table, CoupledSinusoids};
use crate::data::write_table;

fn write_csv(path: &Path, table: &TimeSeriesTable) {
    write_table(File::create(path).unwrap(), table).unwrap();
}

fn toy_config(dir: &Path, data: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for pair in [
        "window.lookback=24",
        "window.horizon=6",
        "window.stride=2",
        "decompose.period=6",
        "train.epochs=2",
        "train.patience=2",
        "train.batch=16",
        "train.lr=0.003",
        "model.tcn_layers=2",
        "sweep.max_layers=2",
    ] {
        cfg.set_pair(pair).unwrap();
    }
    cfg.dataset_path = Some(data.to_path_buf());
    cfg.output_dir = dir.join("out");
    cfg
}

fn synthetic_csv(dir: &Path, len: usize) -> std::path::PathBuf {
    let path = dir.join("sines.csv");
    let table = CoupledSinusoids {
        len,
        seed: 4,
        ..CoupledSinusoids::default()
    }
    .generate();
    write_csv(&path, &table);
    path
}

/// Three channels: `b` is `a` nudged up, `c` sits further above `b`.
fn offset_csv(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("offsets.csv");
    let values = Array2::from_shape_fn((240, 3), |(t, c)| {
        let base = (t as f64 * std::f64::consts::TAU / 6.0).sin() + t as f64 * 0.01;
        base + [0.0, 0.2, 0.5][c] + 0.001 * ((t * 7 + c * 3) % 5) as f64
    });
    write_csv(&path, &hourly_table(values, vec!["a".into(), "b".into(), "c".into()]));
    path
}

#[test]
fn stages_require_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), 400);
    let cfg = toy_config(dir.path(), &data);
    match train_stage(&cfg) {
        Err(PipelineError::MissingArtifact { path, command }) => {
            assert!(path.ends_with("ingest.json"));
            assert_eq!(command, "ingest");
        }
        other => panic!("expected missing artifact, got {other:?}"),
    }
    ingest(&cfg).unwrap();
    match train_stage(&cfg) {
        Err(e @ PipelineError::MissingArtifact { .. }) => {
            assert!(e.to_string().contains("graph.json"), "{e}");
            assert_eq!(e.class(), "missing-artifact");
        }
        other => panic!("expected missing graph, got {other:?}"),
    }
    build_graph_stage(&cfg).unwrap();
    assert!(matches!(evaluate_stage(&cfg), Err(PipelineError::MissingArtifact { command: "train", .. })));

    let mut changed = cfg.clone();
    changed.set_pair("graph.k=2").unwrap();
    assert!(matches!(train_stage(&changed), Err(PipelineError::StaleArtifact { .. })));
    let mut reseeded = cfg.clone();
    reseeded.set_pair("train.seeds=3").unwrap();
    assert!(load_graphs(&reseeded, 2).is_ok());
}

#[test]
fn decompose_stage_reconstructs_the_ingested_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), 300);
    let cfg = toy_config(dir.path(), &data);
    let ds = ingest(&cfg).unwrap();
    let parts = decompose_stage(&cfg).unwrap();
    let sum = &parts.trend.values + &parts.seasonal.values + &parts.residual.values;
    let err = (&sum - &ds.table.values).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err <= 1e-9, "{err}");
    let paths = Artifacts::new(&cfg.output_dir);
    let text = fs::read_to_string(paths.component(ComponentKind::Seasonal)).unwrap();
    assert!(text.starts_with(&format!("# config_hash={}\ndate,x0,x1\n", cfg.hash())));
}

#[test]
fn ingest_round_trips_and_standardizes_on_train_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), 300);
    let cfg = toy_config(dir.path(), &data);
    let ds = ingest(&cfg).unwrap();
    let back = load_dataset(&cfg).unwrap();
    assert_eq!(back.table, ds.table);
    assert_eq!(back.splits, ds.splits);
    assert_eq!(ds.splits.train, 0..210);
    let train = ds.table.values.slice(s![0..210, ..]);
    for c in 0..2 {
        let col = train.column(c);
        assert!(col.mean().unwrap().abs() < 1e-12);
    }
    let config = fs::read_to_string(Artifacts::new(&cfg.output_dir).config()).unwrap();
    assert!(config.contains("window.lookback = 24"));
}

#[test]
fn build_graph_on_offset_toy() {
    let dir = tempfile::tempdir().unwrap();
    let data = offset_csv(dir.path());
    let mut cfg = toy_config(dir.path(), &data);
    cfg.set_pair("graph.k=1").unwrap();
    ingest(&cfg).unwrap();
    let graphs = build_graph_stage(&cfg).unwrap();
    assert_eq!(graphs.components.trend.edges(), vec![(0, 1), (1, 0), (2, 1)]);
    let paths = Artifacts::new(&cfg.output_dir);
    let edges = fs::read_to_string(paths.edges("trend")).unwrap();
    assert!(edges.ends_with("src,dst\n0,1\n1,0\n2,1\n"), "{edges}");
    assert_eq!(load_graphs(&cfg, 3).unwrap(), graphs);
    for name in ["trend", "seasonal", "residual", RAW_GRAPH] {
        assert!(paths.adjacency(name).is_file() && paths.distance(name).is_file());
    }
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), 400);
    let a = toy_config(dir.path(), &data);
    let mut b = a.clone();
    b.output_dir = dir.path().join("again");
    let ra = run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    let la = fs::read(Artifacts::new(&a.output_dir).report()).unwrap();
    let lb = fs::read(Artifacts::new(&b.output_dir).report()).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ra.len(), 1);
    assert!(ra[0].mse.is_finite() && ra[0].mse >= 0.0);
    assert_eq!(ra[0].config_hash, a.hash());

    let history = fs::read_to_string(Artifacts::new(&a.output_dir).history(0)).unwrap();
    assert!(history.lines().nth(1) == Some("step,loss"));
}

#[test]
fn settings_select_channels() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), 400);
    let base = toy_config(dir.path(), &data);
    let ds = ingest(&base).unwrap();
    let graphs = build_graph_stage(&base).unwrap();
    let mut miso = base.clone();
    miso.set_pair("train.setting=MISO").unwrap();
    let mut siso = base.clone();
    siso.set_pair("train.setting=SISO").unwrap();
    siso.set_pair("train.target_channel=0").unwrap();
    let rm = run_once(&ds, &graphs, &miso, None, 0).unwrap();
    let rs = run_once(&ds, &graphs, &siso, None, 0).unwrap();
    assert_eq!(rm.outcome.model.config.channels, 2);
    assert_eq!(rs.outcome.model.config.channels, 1);
    assert_eq!(rm.report.setting, Setting::Miso);
    assert_eq!(rs.report.setting, Setting::Siso);

    let mut bad = base.clone();
    bad.set_pair("train.setting=MISO").unwrap();
    bad.set_pair("train.target_channel=5").unwrap();
    assert!(matches!(
        run_once(&ds, &graphs, &bad, None, 0),
        Err(PipelineError::Train(TrainError::InvalidTargetChannel { .. }))
    ));
}

#[test]
fn ablation_sweep_and_forecast_stages() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), 400);
    let cfg = toy_config(dir.path(), &data);
    let ds = ingest(&cfg).unwrap();
    let graphs = build_graph_stage(&cfg).unwrap();

    let rows = ablate_stage(&cfg).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.report.mse.is_finite()));
    let original = run_once(&ds, &graphs, &cfg, None, 0).unwrap();
    assert_eq!(rows[4].report, original.report);

    let sweep = sweep_stage(&cfg).unwrap();
    assert_eq!(sweep.iter().map(|p| p.layers).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(sweep[0].report, original.report);
    let table = fs::read_to_string(Artifacts::new(&cfg.output_dir).sweep_table()).unwrap();
    assert_eq!(table.lines().nth(1), Some("layers,mse"));

    train_stage(&cfg).unwrap();
    let f = forecast_stage(&cfg).unwrap();
    assert_eq!(f.values.dim(), (6, 2));
    assert_eq!(f.timestamps[0], *ds.table.timestamps.last().unwrap() + ds.table.step);
    // Raw units: the standardized forecast is mapped through mean and std.
    let std_pred = ds.stats.standardize(&f).unwrap();
    assert!(std_pred.values.iter().all(|v| v.is_finite() && v.abs() < 10.0));
}
