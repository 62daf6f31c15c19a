mod common;

use common::{small_train_config, tempdir};
use nfkit::bench::{init_label, run_experiment, ExperimentSpec, Metric, ModelEntry, Threshold};
use nfkit::data::SynthConfig;
use nfkit::flow::{ObjectiveKind, Variant};
use nfkit::metrics::EvalConfig;
use nfkit::Error;

fn quick_eval() -> EvalConfig {
    let mut e = EvalConfig { compute_wasserstein: false, ..Default::default() };
    e.classifier.hidden = 16;
    e.classifier.max_epochs = 10;
    e.generation.euler_steps = 10;
    e
}

/// Two seeds of a 20-step environment model on a small drift dataset.
fn tiny_flow_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::oracle_smoke();
    spec.name = "tiny".into();
    spec.seeds = vec![4, 5];
    spec.dataset = SynthConfig { cells_per_slide: 120, feature_dim: 4, ..Default::default() };
    spec.train = nfkit::flow::TrainConfig { steps: 20, ..small_train_config(0) };
    spec.eval = quick_eval();
    let m = "glvfm".to_string();
    spec.models = vec![ModelEntry::Flow { label: m.clone(), objective: ObjectiveKind::Glvfm, variant: Variant::NicheFlow }];
    spec.thresholds = vec![
        Threshold::VsUntrained { criterion: "a".into(), model: m.clone(), metric: Metric::Psd, max_ratio: 1e9 },
        Threshold::AtMost { criterion: "b".into(), model: m.clone(), metric: Metric::Spd, value: 1e9 },
        Threshold::AtLeast { criterion: "c".into(), model: m, metric: Metric::OneNnF1, value: 2.0 },
    ];
    spec
}

#[test]
fn oracle_spec_passes_trivially() {
    let dir = tempdir("bench-oracle");
    let out = run_experiment(&ExperimentSpec::oracle_smoke(), Some(&dir)).unwrap();
    assert!(out.passed(), "{}", out.markdown());
    assert_eq!(out.runs.len(), 3);
    for r in &out.runs {
        assert_eq!((r.report.psd, r.report.spd), (0.0, 0.0));
        assert_eq!(r.report.metadata.model_id, "oracle");
    }
    let md = std::fs::read_to_string(dir.join("results.md")).unwrap();
    assert!(md.contains("| oracle | 0.00000 ± 0.00000 | 0.00000 ± 0.00000 |"), "{md}");
    assert_eq!(md.matches("| PASS |").count(), 3);
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.join("reports/oracle-seed2.toml").exists());
    assert!(dir.join("logs/oracle-seed3.log").exists());
    let spec = ExperimentSpec::from_toml(&std::fs::read_to_string(dir.join("spec.toml")).unwrap()).unwrap();
    assert_eq!(spec, ExperimentSpec::oracle_smoke());
}

#[test]
fn identical_seeds_give_identical_tables() {
    let spec = tiny_flow_spec();
    let (d1, d2) = (tempdir("bench-det-1"), tempdir("bench-det-2"));
    let a = run_experiment(&spec, Some(&d1)).unwrap();
    let b = run_experiment(&spec, Some(&d2)).unwrap();
    assert_eq!(a, b);
    for f in ["results.md", "results.csv", "reports/glvfm-seed4.toml", "runs/glvfm-seed5/loss.csv"] {
        assert_eq!(std::fs::read(d1.join(f)).unwrap(), std::fs::read(d2.join(f)).unwrap(), "{f}");
    }
    assert_eq!(a.runs.len(), 4, "trained and initialization rows per seed");
    assert_eq!(a.labels(), vec!["glvfm".to_string(), init_label("glvfm")]);
    assert_eq!(a.run("glvfm", 4).unwrap().losses.len(), 20);
    assert!(a.run(&init_label("glvfm"), 4).unwrap().losses.is_empty());
    let verdicts: Vec<bool> = a.checks.iter().map(|c| c.passed).collect();
    assert_eq!(verdicts, [true, true, false]);
    assert!(!a.passed());
}

#[test]
fn seeds_change_the_outcome() {
    let spec = tiny_flow_spec();
    let out = run_experiment(&spec, None).unwrap();
    assert_ne!(out.run("glvfm", 4).unwrap().report.psd, out.run("glvfm", 5).unwrap().report.psd);
}

#[test]
fn threads_do_not_change_results() {
    let spec = tiny_flow_spec();
    std::env::set_var("NFKIT_THREADS", "1");
    let a = run_experiment(&spec, None).unwrap();
    std::env::set_var("NFKIT_THREADS", "3");
    let b = run_experiment(&spec, None).unwrap();
    std::env::remove_var("NFKIT_THREADS");
    assert_eq!(a, b);
}

#[test]
fn failing_run_points_to_its_log() {
    let mut spec = tiny_flow_spec();
    spec.train.optimizer.lr = 1e300;
    spec.thresholds.clear();
    let dir = tempdir("bench-fail");
    match run_experiment(&spec, Some(&dir)) {
        Err(Error::RunFailed { run, log, .. }) => {
            assert_eq!(run, "glvfm seed 4");
            let text = std::fs::read_to_string(&log).unwrap();
            assert!(text.contains("failed"), "{text}");
        }
        other => panic!("expected a run failure, got {other:?}"),
    }
    assert!(matches!(run_experiment(&spec, None), Err(Error::RunFailed { .. })));
}

#[test]
fn presets_round_trip_and_validate() {
    for name in ExperimentSpec::PRESETS {
        let spec = ExperimentSpec::preset(name).unwrap();
        spec.validate().unwrap();
        assert_eq!(ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap(), spec);
        assert!(spec.seeds.len() >= 3);
    }
    assert!(ExperimentSpec::preset("nope").is_none());
    let full = ExperimentSpec::full_matrix();
    assert_eq!(full.models.len(), 7);
}

#[test]
fn invalid_specs_are_rejected() {
    let base = tiny_flow_spec();
    let mut s = base.clone();
    s.seeds = vec![1, 1];
    assert!(s.validate().is_err());
    let mut s = base.clone();
    s.thresholds.push(Threshold::AtMost { criterion: "x".into(), model: "missing".into(), metric: Metric::Psd, value: 1.0 });
    assert!(s.validate().is_err());
    let mut s = base.clone();
    s.thresholds.push(Threshold::VsUntrained { criterion: "x".into(), model: "glvfm".into(), metric: Metric::OneNnF1, max_ratio: 1.0 });
    assert!(s.validate().is_err());
    let mut s = base.clone();
    s.models.push(ModelEntry::Flow { label: "sp".into(), objective: ObjectiveKind::Glvfm, variant: Variant::SpFlow });
    assert!(s.validate().is_err());
    let mut s = base;
    s.models.push(ModelEntry::Oracle { label: "glvfm".into() });
    assert!(s.validate().is_err());
}

#[test]
fn spec_file_format() {
    let text = r#"
name = "custom"
seeds = [1, 2, 3]

[dataset]
cells_per_slide = 100

[[models]]
kind = "oracle"
label = "truth"

[[thresholds]]
kind = "at-most"
criterion = "zero"
model = "truth"
metric = "psd"
value = 0.0
"#;
    let spec = ExperimentSpec::from_toml(text).unwrap();
    assert_eq!(spec.dataset.cells_per_slide, 100);
    assert_eq!(spec.dataset.num_types, 2);
    assert_eq!(spec.models, vec![ModelEntry::Oracle { label: "truth".into() }]);
    spec.validate().unwrap();
}
