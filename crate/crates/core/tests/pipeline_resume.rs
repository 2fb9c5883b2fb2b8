use std::path::Path;

use demand_core::pipeline::{run_pipeline, PipelineConfig, Stage, StageStatus};
use demand_core::synth::{self, SynthSpec};
use demand_core::{CalendarDate, ErrorKind};

fn fixture(dir: &Path) {
    let mut spec = SynthSpec::desk_default(21);
    spec.n_stores = 3;
    spec.n_items = 2;
    spec.end = CalendarDate::new(2013, 9, 30).unwrap();
    synth::generate(&spec, dir).unwrap();
}

fn config(data: &Path, out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::for_inputs(data, out);
    let pairs: Vec<(String, String)> = [
        ("split.train_start", "2013-01-01"),
        ("split.train_end", "2013-07-31"),
        ("split.test_start", "2013-08-01"),
        ("split.test_end", "2013-09-30"),
        ("forest.ntree", "10"),
        ("sweep.layers", "2"),
        ("sweep.neurons", "10,20"),
        ("runs", "1"),
        ("net.epochs", "5"),
        ("compare.net_runs", "1"),
        ("compare.bagging_runs", "1"),
        ("compare.bagging_ntree", "5"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    cfg.apply(&pairs, Path::new("")).unwrap();
    cfg
}

#[test]
fn second_run_loads_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fixture(&data);
    let cfg = config(&data, &dir.path().join("out"));

    let first = run_pipeline(&cfg, Stage::Predict).unwrap();
    assert!(first.stages.iter().all(|s| s.1 == StageStatus::Computed));
    let predictions = std::fs::read(first.predictions.as_ref().unwrap()).unwrap();

    let second = run_pipeline(&cfg, Stage::Predict).unwrap();
    // predictions are always rewritten from the stored models
    for (stage, status, _) in &second.stages {
        let expected = if *stage == Stage::Predict { StageStatus::Computed } else { StageStatus::Loaded };
        assert_eq!(*status, expected, "{stage:?}");
    }
    assert_eq!(std::fs::read(second.predictions.unwrap()).unwrap(), predictions);

    let reports = cfg.output_dir.join("reports");
    for f in ["sweep.csv", "compare.csv", "compare.txt", "importance_Devent.csv"] {
        assert!(reports.join(f).is_file(), "missing {f}");
    }
    assert!(cfg.output_dir.join("manifest.txt").is_file());
}

#[test]
fn changing_a_late_parameter_keeps_early_stages() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fixture(&data);
    let mut cfg = config(&data, &dir.path().join("out"));
    run_pipeline(&cfg, Stage::Train).unwrap();

    cfg.set("compare.bagging_ntree", "6").unwrap();
    let again = run_pipeline(&cfg, Stage::Train).unwrap();
    assert_eq!(again.status(Stage::Ingest), Some(StageStatus::Loaded));
    assert_eq!(again.status(Stage::Select), Some(StageStatus::Loaded));
    assert_eq!(again.status(Stage::Sweep), Some(StageStatus::Loaded));
    assert_eq!(again.status(Stage::Train), Some(StageStatus::Computed));
    assert_eq!(again.status(Stage::Predict), None);
}

#[test]
fn weather_only_run_has_no_event_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fixture(&data);
    let mut cfg = config(&data, &dir.path().join("out"));
    cfg.set("use_events", "false").unwrap();
    cfg.set("sweep.enabled", "false").unwrap();
    let summary = run_pipeline(&cfg, Stage::Compare).unwrap();
    assert!(summary.predictions.is_none());
    let compare = std::fs::read_to_string(cfg.output_dir.join("reports/compare.csv")).unwrap();
    assert!(compare.contains("Dweather"));
    assert!(!compare.contains("Devent"));
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::for_inputs(&dir.path().join("nowhere"), &dir.path().join("out"));
    let err = run_pipeline(&cfg, Stage::Ingest).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}
