use approx::assert_relative_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synthetic::hourly_table;
use crate::data::{make_time_features, window_samples, TIME_FEATURES};
use crate::decompose::{ComponentKind, DecompositionConfig};
use crate::diff::Tensor;
use crate::graph::ComponentGraph;
use crate::model::{AblationFlags, ModelConfig};

fn sample(lookback: Array2<f64>, target: Array2<f64>) -> WindowSample {
    let (l, h) = (lookback.ncols(), target.ncols());
    WindowSample {
        lookback,
        target,
        time_features: Array2::zeros((TIME_FEATURES, l)),
        target_time_features: Array2::zeros((TIME_FEATURES, h)),
        t_end: l - 1,
    }
}

struct Oracle;

impl Forecaster for Oracle {
    fn forecast(&self, samples: &[&WindowSample]) -> Result<Vec<Array2<f64>>, TrainError> {
        Ok(samples.iter().map(|s| s.target.clone()).collect())
    }
}

fn sinusoid_samples(channels: usize, len: usize, lookback: usize, horizon: usize, seed: u64) -> Vec<WindowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((len, channels), |(t, d)| {
        (t as f64 * 0.4 + d as f64).sin() + rng.random_range(-0.1..0.1)
    });
    let names = (0..channels).map(|d| format!("c{d}")).collect();
    window_samples(&hourly_table(values, names), lookback, horizon, 1).unwrap()
}

fn complete_graph(d: usize) -> ComponentGraph {
    let edges: Vec<(usize, usize)> = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    ComponentGraph::from_edges(d, ComponentKind::Trend, &edges).unwrap()
}

fn small_model(channels: usize, lookback: usize, horizon: usize, flags: AblationFlags, seed: u64) -> DstModel {
    let mut cfg = ModelConfig::new(channels, lookback, horizon, DecompositionConfig::for_period(4));
    cfg.tcn_layers = 2;
    cfg.flags = flags;
    let graphs = vec![complete_graph(channels); cfg.slots()];
    DstModel::new(cfg, &graphs, seed).unwrap()
}

#[test]
fn metric_examples() {
    let p = array![[0.0, 2.0]];
    let t = array![[1.0, 1.0]];
    assert_eq!(mse(p.view(), t.view()).unwrap(), 1.0);
    assert_eq!(mae(p.view(), t.view()).unwrap(), 1.0);
    assert_eq!(mse(t.view(), t.view()).unwrap(), 0.0);
    let zeros = Array2::zeros((3, 4));
    let ones = Array2::ones((3, 4));
    assert_eq!(mse(zeros.view(), ones.view()).unwrap(), 1.0);
    assert_eq!(mae(zeros.view(), ones.view()).unwrap(), 1.0);
    assert!(matches!(mse(p.view(), ones.view()), Err(TrainError::Shape(_))));
}

#[test]
fn repeat_last_examples() {
    let s = sample(array![[1.0, 3.0, 5.0]], Array2::zeros((1, 3)));
    assert_eq!(repeat_last(&s), array![[5.0, 5.0, 5.0]]);

    let c = sample(Array2::from_elem((2, 4), 7.0), Array2::from_elem((2, 3), 7.0));
    assert_eq!(mse(repeat_last(&c).view(), c.target.view()).unwrap(), 0.0);

    let ramp = sample(array![[0.0, 1.0, 2.0, 3.0]], array![[4.0, 5.0, 6.0]]);
    let e = mse(repeat_last(&ramp).view(), ramp.target.view()).unwrap();
    assert_relative_eq!(e, 14.0 / 3.0, max_relative = 1e-15);
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let cfg = AdamConfig::default();
    let mut p = vec![Tensor::vector(vec![0.5, -2.0])];
    let g = vec![Tensor::vector(vec![1.0, 0.0])];
    let mut state = AdamState::new(&p);
    adam_step(&mut p, &g, &mut state, 1e-4, &cfg);
    // m̂ = 1 and v̂ = 1 after bias correction.
    let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
    assert_relative_eq!(p[0].data()[0], expected, max_relative = 1e-15);
    assert_relative_eq!(p[0].data()[0] - 0.5, -9.99999e-5, max_relative = 1e-6);
    assert_eq!(p[0].data()[1], -2.0);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_constant_gradient_steps_stay_near_lr() {
    let cfg = AdamConfig::default();
    let lr = 1e-3;
    let mut p = vec![Tensor::scalar(0.0)];
    let g = vec![Tensor::scalar(-3.0)];
    let mut state = AdamState::new(&p);
    let mut prev = 0.0;
    for _ in 0..2 {
        adam_step(&mut p, &g, &mut state, lr, &cfg);
        let step = p[0].data()[0] - prev;
        prev = p[0].data()[0];
        assert!((step - lr).abs() < 0.01 * lr, "step {step}");
    }
}

#[test]
fn head_only_model_learns_lookback_mean() {
    let (d, l, h) = (2, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<WindowSample> = (0..64)
        .map(|_| {
            let lb = Array2::from_shape_fn((d, l), |_| rng.random_range(-1.0..1.0));
            let mean = lb.mean_axis(ndarray::Axis(1)).unwrap();
            let target = Array2::from_shape_fn((d, h), |(c, _)| mean[c]);
            sample(lb, target)
        })
        .collect();
    let flags = AblationFlags {
        decomposition: false,
        time_embedding: false,
        temporal: false,
        spatial: false,
    };
    let model = small_model(d, l, h, flags, 1);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 64,
        max_epochs: 200,
        patience: 200,
        ..TrainConfig::default()
    };
    let out = train(model, &data, &data, &cfg).unwrap();
    assert_eq!(out.history.len(), 200);
    let e = evaluate(&out.model, &data, Setting::Mimo, 0).unwrap();
    assert!(e.mse < 1e-6, "training MSE {}", e.mse);
}

#[test]
fn training_is_deterministic() {
    let data = sinusoid_samples(3, 120, 12, 4, 2);
    let (tr, va) = data.split_at(80);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 3,
        patience: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || train(small_model(3, 12, 4, AblationFlags::default(), 7), &tr.to_vec(), &va.to_vec(), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history.last().unwrap().1.to_bits(), b.history.last().unwrap().1.to_bits());
    assert!(a.history.iter().all(|(_, l)| l.is_finite()));

    let other = train(
        small_model(3, 12, 4, AblationFlags::default(), 7),
        &tr.to_vec(),
        &va.to_vec(),
        &TrainConfig { seed: 12, ..cfg.clone() },
    )
    .unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn returns_the_best_validation_checkpoint() {
    let data = sinusoid_samples(2, 150, 12, 4, 3);
    let (tr, va) = (data[..100].to_vec(), data[100..].to_vec());
    let cfg = TrainConfig {
        learning_rate: 3e-2,
        batch_size: 8,
        max_epochs: 12,
        patience: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(small_model(2, 12, 4, AblationFlags::default(), 3), &tr, &va, &cfg).unwrap();
    let best = out.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
    assert_eq!(out.best_epoch, Some(best.epoch));
    let e = evaluate(&out.model, &va, Setting::Mimo, 0).unwrap();
    assert_eq!(e.mse.to_bits(), out.best_val_loss.to_bits());
    if out.stopped_early {
        assert_eq!(out.epochs.len(), best.epoch + 1 + cfg.patience);
    } else {
        assert_eq!(out.epochs.len(), cfg.max_epochs);
    }
}

#[test]
fn divergence_returns_last_finite_checkpoint() {
    let data = sinusoid_samples(2, 80, 12, 4, 4);
    let model = small_model(2, 12, 4, AblationFlags::default(), 9);
    let initial = model.params.clone();
    let cfg = TrainConfig {
        learning_rate: 1e200,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = train(model, &data, &data, &cfg).unwrap();
    assert!(out.diverged);
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.model.params, initial);
    assert!(out.history.iter().all(|(_, l)| l.is_finite()));
}

#[test]
fn training_errors() {
    let model = small_model(2, 12, 4, AblationFlags::default(), 0);
    let empty: Vec<WindowSample> = Vec::new();
    assert!(matches!(
        train(model.clone(), &empty, &empty, &TrainConfig::default()),
        Err(TrainError::EmptyTrainingSplit)
    ));
    let data = sinusoid_samples(2, 40, 12, 4, 0);
    let bad = TrainConfig {
        patience: 60,
        ..TrainConfig::default()
    };
    assert!(matches!(train(model.clone(), &data, &data, &bad), Err(TrainError::Config(_))));
    let miso = TrainConfig {
        setting: Setting::Miso,
        target_channel: 2,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(model, &data, &data, &miso),
        Err(TrainError::InvalidTargetChannel { channel: 2, channels: 2 })
    ));
}

#[test]
fn oracle_and_repeat_last_improvements() {
    let data = sinusoid_samples(3, 60, 12, 4, 5);
    let perfect = evaluate(&Oracle, &data, Setting::Mimo, 0).unwrap();
    assert_eq!(perfect.mse, 0.0);
    let r = EvalReport::new(&perfect, "toy", 0, "h");
    assert_eq!(r.imp_mse, 100.0);
    assert_eq!(r.imp_mae, 100.0);

    let same = evaluate(&RepeatLast, &data, Setting::Mimo, 0).unwrap();
    assert_eq!(same.mse, same.baseline_mse);
    let r = EvalReport::new(&same, "toy", 0, "h");
    assert_eq!(r.imp_mse, 0.0);
    assert_eq!(r.imp_mae, 0.0);
}

#[test]
fn miso_restricts_mimo_predictions() {
    let data = sinusoid_samples(3, 80, 12, 4, 6);
    let model = small_model(3, 12, 4, AblationFlags::default(), 2);
    let refs: Vec<&WindowSample> = data.iter().collect();
    let preds = model.predict(&refs, 7).unwrap();
    for c in 0..3 {
        let e = evaluate(&model, &data, Setting::Miso, c).unwrap();
        let (mut sq, mut ab, mut n) = (0.0, 0.0, 0);
        for (p, s) in preds.iter().zip(&data) {
            for h in 0..4 {
                let err = p[[c, h]] - s.target[[c, h]];
                sq += err * err;
                ab += err.abs();
                n += 1;
            }
        }
        assert_relative_eq!(e.mse, sq / n as f64, max_relative = 1e-12);
        assert_relative_eq!(e.mae, ab / n as f64, max_relative = 1e-12);
    }
    assert!(matches!(
        evaluate(&model, &data, Setting::Miso, 3),
        Err(TrainError::InvalidTargetChannel { .. })
    ));
    assert!(evaluate(&model, &data, Setting::Siso, 0).is_err());
}

#[test]
fn evaluate_is_pure() {
    let data = sinusoid_samples(2, 700, 12, 4, 7);
    let model = small_model(2, 12, 4, AblationFlags::default(), 4);
    let a = evaluate(&model, &data, Setting::Mimo, 0).unwrap();
    let b = evaluate(&model, &data, Setting::Mimo, 0).unwrap();
    assert_eq!(a.mse.to_bits(), b.mse.to_bits());
    assert_eq!(a.mae.to_bits(), b.mae.to_bits());
    assert_eq!(a, b);
}

#[test]
fn table_windows_match_materialized_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let values = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.0..1.0));
    let table = hourly_table(values, vec!["a".into(), "b".into()]);
    let features = make_time_features(&table.timestamps);
    let all = window_samples(&table, 6, 3, 1).unwrap();
    let src = TableWindows {
        table: &table,
        time_features: &features,
        ends: all.iter().map(|s| s.t_end).collect(),
        lookback: 6,
        horizon: 3,
    };
    assert_eq!(SampleSource::len(&src), all.len());
    for (i, s) in all.iter().enumerate() {
        assert_eq!(&src.sample(i).unwrap(), s);
    }
}

#[test]
fn toggling_a_flag_twice_restores_behavior() {
    let data = sinusoid_samples(2, 40, 12, 4, 9);
    let refs: Vec<&WindowSample> = data.iter().collect();
    let base = small_model(2, 12, 4, AblationFlags::default(), 5);
    for v in AblationVariant::ALL {
        let off = v.apply(AblationFlags::default());
        let mut back = off;
        back.decomposition = true;
        back.time_embedding = true;
        back.temporal = true;
        back.spatial = true;
        let m = small_model(2, 12, 4, back, 5);
        assert_eq!(m.predict(&refs, 8).unwrap(), base.predict(&refs, 8).unwrap(), "{v}");
    }
}

#[test]
fn ablation_harness_runs_every_variant_in_order() {
    let rows = ablate(AblationFlags::default(), |v, flags| -> Result<EvalReport, TrainError> {
        let removed = [flags.decomposition, flags.time_embedding, flags.temporal, flags.spatial]
            .iter()
            .filter(|f| !**f)
            .count();
        assert_eq!(removed, usize::from(v != AblationVariant::Original));
        let e = Evaluation {
            setting: Setting::Mimo,
            horizon: 4,
            samples: 1,
            mse: removed as f64,
            mae: 0.0,
            baseline_mse: 1.0,
            baseline_mae: 1.0,
        };
        Ok(EvalReport::new(&e, v.name(), 0, ""))
    })
    .unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.report.dataset.as_str()).collect();
    assert_eq!(
        names,
        ["no-decomposition", "no-time-embedding", "no-temporal", "no-spatial", "original"]
    );

    let sweep = layer_sweep(4, |layers| -> Result<EvalReport, TrainError> {
        let e = Evaluation {
            setting: Setting::Mimo,
            horizon: 4,
            samples: 1,
            mse: layers as f64,
            mae: 0.0,
            baseline_mse: 1.0,
            baseline_mae: 1.0,
        };
        Ok(EvalReport::new(&e, "toy", 0, ""))
    })
    .unwrap();
    assert_eq!(sweep.iter().map(|p| p.layers).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn report_lines_and_summary() {
    let e = Evaluation {
        setting: Setting::Miso,
        horizon: 96,
        samples: 10,
        mse: 0.5,
        mae: 0.25,
        baseline_mse: 2.0,
        baseline_mae: 1.0,
    };
    let r = EvalReport::new(&e, "toy", 3, "abc");
    let line = r.to_json_line();
    assert!(line.starts_with(r#"{"dataset":"toy","setting":"MISO","horizon":96,"seed":3,"mse":0.5,"mae":0.25,"imp_mse":75.0,"imp_mae":75.0"#));
    let back: EvalReport = serde_json::from_str(&line).unwrap();
    assert_eq!(back, r);

    let mut r2 = r.clone();
    r2.seed = 4;
    let summary = format_summary(&[r, r2]);
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().last().unwrap().contains("mean"));

    let mut buf = Vec::new();
    write_history(&mut buf, &[(0, 1.5), (1, 0.25)]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,1.5\n1,0.25\n");
}

#[test]
fn setting_names_round_trip() {
    for s in [Setting::Mimo, Setting::Miso, Setting::Siso] {
        assert_eq!(s.name().parse::<Setting>().unwrap(), s);
        assert_eq!(s.to_string().to_lowercase().parse::<Setting>().unwrap(), s);
    }
    assert!("mixed".parse::<Setting>().is_err());
}

proptest! {
    #[test]
    fn improvement_matches_hand_recomputation(base in 0.01f64..10.0, model in 0.0f64..10.0) {
        let e = Evaluation {
            setting: Setting::Mimo,
            horizon: 1,
            samples: 1,
            mse: model,
            mae: model,
            baseline_mse: base,
            baseline_mae: base,
        };
        let r = EvalReport::new(&e, "p", 0, "");
        prop_assert!((r.imp_mse - 100.0 * (r.baseline_mse - r.mse) / r.baseline_mse).abs() < 1e-9);
        prop_assert!(r.mse >= 0.0 && r.mae >= 0.0);
    }

    #[test]
    fn metrics_are_nonnegative_and_mae_bounds_rmse(
        p in proptest::collection::vec(-5.0f64..5.0, 6),
        t in proptest::collection::vec(-5.0f64..5.0, 6),
    ) {
        let p = Array2::from_shape_vec((2, 3), p).unwrap();
        let t = Array2::from_shape_vec((2, 3), t).unwrap();
        let (m, a) = (mse(p.view(), t.view()).unwrap(), mae(p.view(), t.view()).unwrap());
        prop_assert!(m >= 0.0 && a >= 0.0);
        prop_assert!(a * a <= m + 1e-12);
    }
}
