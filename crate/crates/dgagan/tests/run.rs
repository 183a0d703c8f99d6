use dgagan::report::read_metric_log;
use dgagan::run::{export_attention, train_run, Resume, RunPaths, StopAfter};
use dgagan_core::dataset::{build_samples, TrainingSample};
use dgagan_core::models::ModelVariant;
use dgagan_core::phantom::{generate_phantom_cohort, PhantomConfig};
use dgagan_core::train::TrainConfig;

fn samples() -> Vec<TrainingSample> {
    let cohort = generate_phantom_cohort(&PhantomConfig::new(3, [24; 3], 21)).unwrap();
    build_samples(&cohort, &[0, 1, 2]).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        ..TrainConfig::desk(4)
    }
}

/// Metric rows without the wall-clock column.
fn losses(rows: Vec<Vec<String>>) -> Vec<Vec<String>> {
    rows.into_iter().map(|mut r| {
        r.pop();
        r
    }).collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = samples();
    let dir = tempfile::tempdir().unwrap();
    let whole = RunPaths::new(dir.path().join("whole"));
    let split = RunPaths::new(dir.path().join("split"));
    let v = ModelVariant::Dgagan;
    let (full, _) = train_run(v, config(), &s, 1, &whole, Resume::Fresh, StopAfter(None)).unwrap();
    let (part, rows) = train_run(v, config(), &s, 1, &split, Resume::Fresh, StopAfter(Some(2))).unwrap();
    assert_eq!((rows.len(), part.epochs_done), (2, 2));
    let (resumed, rows) = train_run(v, config(), &s, 1, &split, Resume::IfPresent, StopAfter(None)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].metrics.epoch, 3);

    let a = losses(read_metric_log(&whole.metrics()).unwrap());
    let b = losses(read_metric_log(&split.metrics()).unwrap());
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(resumed.models.generator.params, full.models.generator.params);
    assert_eq!(std::fs::read(whole.visits()).unwrap(), std::fs::read(split.visits()).unwrap());

    // a finished run resumes to itself
    let (_, rows) = train_run(v, config(), &s, 1, &split, Resume::IfPresent, StopAfter(None)).unwrap();
    assert!(rows.is_empty());
    // a checkpoint of another variant is refused
    assert!(train_run(ModelVariant::Cgan, config(), &s, 1, &split, Resume::IfPresent, StopAfter(None)).is_err());
}

#[test]
fn attention_export_writes_maps() {
    let s = samples();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path().join("run"));
    let cfg = TrainConfig {
        epochs: 1,
        ..config()
    };
    let (t, _) = train_run(ModelVariant::Dgagan, cfg.clone(), &s, 0, &paths, Resume::Fresh, StopAfter(None)).unwrap();
    let out = dir.path().join("attn");
    let exports = export_attention(&t, &s, &out).unwrap();
    assert_eq!(exports.len(), 1);
    let e = &exports[0];
    let map = dgagan::lvol::read_volume(&e.map_path, dgagan_core::volume::Role::Attention).unwrap();
    assert_eq!(map.extents(), [24; 3]);
    assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(e.mean_inside >= 0.0 && e.mean_outside >= 0.0);
    assert!(out.join("attention_summary.csv").exists());

    let (u, _) = train_run(ModelVariant::Unet, cfg, &s, 0, &RunPaths::new(dir.path().join("u")), Resume::Fresh, StopAfter(None)).unwrap();
    let err = export_attention(&u, &s, &out).unwrap_err();
    assert!(err.to_string().contains("unet"));
}
