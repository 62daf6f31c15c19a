use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nfkit::data::{load_dataset, load_slides, synth_generate, write_cell_table, SynthConfig};
use nfkit::flow::read_loss_trace;
use nfkit::metrics::MetricsReport;
use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
cells_per_slide = 200
feature_dim = 4

[preprocess]
normalize = false
log1p = false
pca_components = 0

[train]
radius = 0.2
steps = 50
instances = 4
checkpoint_every = 10
early_stop_window = 0

[train.network]
embed_dim = 16
mlp_hidden = 32
heads = 2
encoder_layers = 1
decoder_layers = 1
time_frequencies = 8

[train.coupling]
m = 32
n = 8
k_regions = 8

[train.optimizer]
lr = 2e-3

[generate]
euler_steps = 10

[eval]
compute_wasserstein = false

[eval.classifier]
hidden = 16
max_epochs = 10
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self { dir: TempDir::new().unwrap() };
        fs::write(s.path("small.toml"), SMALL).unwrap();
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_nfkit")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    /// Runs with the small config and asserts success.
    fn ok(&self, args: &[&str]) -> String {
        let mut full = vec!["--config", "small.toml"];
        full.extend_from_slice(args);
        let out = self.run(&full);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        let mut full = vec!["--config", "small.toml"];
        full.extend_from_slice(args);
        self.run(&full).status.code().unwrap()
    }

    /// Synthetic data with `t` time points, processed for training.
    fn dataset(&self, t: usize) -> &'static str {
        let tp = t.to_string();
        self.ok(&["synth", "--out", "raw.csv", "--timepoints", &tp, "--seed", "3"]);
        self.ok(&["preprocess", "--in", "raw.csv", "--out", "data.csv"]);
        "data.csv"
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&["synth", "--out", "raw.csv"]);
    assert_eq!(stdout, "t=0: 200 cells\nt=1: 200 cells\n");
    let ds = load_dataset(&sb.path("raw.csv")).unwrap();
    assert_eq!(ds.num_timepoints(), 2);
    assert_eq!(ds.dim(), 4);
    assert!(sb.path("raw.csv.meta.toml").exists());
}

#[test]
fn outputs_create_their_directories() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "a/b/raw.csv"]);
    sb.ok(&["preprocess", "--in", "a/b/raw.csv", "--out", "c/data.csv"]);
    assert!(sb.path("c/data.csv.meta.toml").exists());
}

#[test]
fn synth_is_seed_deterministic() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "a.csv", "--seed", "7"]);
    sb.ok(&["synth", "--out", "b.csv", "--seed", "7"]);
    sb.ok(&["synth", "--out", "c.csv", "--seed", "8"]);
    assert_eq!(read(&sb.path("a.csv")), read(&sb.path("b.csv")));
    assert_eq!(read(&sb.path("a.csv.meta.toml")), read(&sb.path("b.csv.meta.toml")));
    assert_ne!(read(&sb.path("a.csv")), read(&sb.path("c.csv")));
}

#[test]
fn synth_time_points_appear_in_the_table() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "raw.csv", "--timepoints", "3"]);
    let text = fs::read_to_string(sb.path("raw.csv")).unwrap();
    let times: BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(times.into_iter().collect::<Vec<_>>(), ["0", "1", "2"]);
}

#[test]
fn invalid_configuration_exits_2() {
    let sb = Sandbox::new();
    assert_eq!(sb.code(&["synth", "--out", "x.csv", "--timepoints", "1"]), 2);
    fs::write(sb.path("bad.toml"), "[synth]\ncells_per_slide = \"many\"\n").unwrap();
    assert_eq!(sb.run(&["--config", "bad.toml", "synth", "--out", "x.csv"]).status.code(), Some(2));
    fs::write(sb.path("typo.toml"), "[trian]\nsteps = 3\n").unwrap();
    assert_eq!(sb.run(&["--config", "typo.toml", "synth", "--out", "x.csv"]).status.code(), Some(2));
    assert_eq!(sb.run(&["synth"]).status.code(), Some(2), "missing required flag");
    assert_eq!(sb.run(&["no-such-verb"]).status.code(), Some(2));
}

#[test]
fn preprocess_skips_selected_stages() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "raw.csv"]);
    sb.ok(&["preprocess", "--in", "raw.csv", "--out", "p.csv", "--skip-normalize", "--skip-log", "--pca", "3"]);
    let ds = load_dataset(&sb.path("p.csv")).unwrap();
    assert_eq!(ds.dim(), 3);
    let st = ds.meta.stages;
    assert!(!st.normalized && !st.log1p);
    assert!(st.pca && st.standardized_features && st.standardized_coords);
}

#[test]
fn preprocess_rejects_a_repeated_stage() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "raw.csv"]);
    sb.ok(&["preprocess", "--in", "raw.csv", "--out", "p.csv"]);
    let before = read(&sb.path("p.csv"));
    assert_eq!(sb.code(&["preprocess", "--in", "p.csv", "--out", "p.csv"]), 2);
    assert_eq!(read(&sb.path("p.csv")), before);
}

#[test]
fn preprocess_subsample_halves_each_slide() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "raw.csv", "--cells", "301"]);
    sb.ok(&["preprocess", "--in", "raw.csv", "--out", "half.csv", "--subsample", "0.5"]);
    let before = load_dataset(&sb.path("raw.csv")).unwrap();
    let after = load_dataset(&sb.path("half.csv")).unwrap();
    for (a, b) in before.slides.iter().zip(&after.slides) {
        assert!((b.len() as f64 - a.len() as f64 / 2.0).abs() <= 1.0, "{} -> {}", a.len(), b.len());
    }
}

#[test]
fn training_halves_the_loss() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    sb.ok(&["train", "--data", data, "--out", "run", "--objective", "glvfm", "--steps", "200"]);
    let trace = read_loss_trace(&sb.path("run/loss.csv")).unwrap();
    assert_eq!(trace.len(), 200);
    let mean = |s: &[nfkit::flow::LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&trace[..20]), mean(&trace[180..]));
    assert!(last * 2.0 <= first, "first {first} last {last}");
}

#[test]
fn zero_steps_store_the_initialization() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    let out = sb.ok(&["train", "--data", data, "--out", "init", "--steps", "0"]);
    assert!(out.contains("0 steps"), "{out}");
    assert!(sb.path("init/final.ckpt").exists());
    assert!(read_loss_trace(&sb.path("init/loss.csv")).unwrap().is_empty());
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    sb.ok(&["train", "--data", data, "--out", "full", "--steps", "30"]);
    sb.ok(&["train", "--data", data, "--out", "part", "--steps", "20"]);
    sb.ok(&["train", "--data", data, "--out", "part", "--resume", "--steps", "30"]);
    assert_eq!(read(&sb.path("full/loss.csv")), read(&sb.path("part/loss.csv")));
    assert_eq!(read(&sb.path("full/final.ckpt")), read(&sb.path("part/final.ckpt")));
}

#[test]
fn per_cell_variant_defaults_to_cfm() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    let out = sb.ok(&["train", "--data", data, "--out", "sp", "--variant", "per-cell", "--steps", "5"]);
    assert!(out.starts_with("cfm spflow"), "{out}");
    assert_eq!(sb.code(&["train", "--data", data, "--out", "sp2", "--variant", "per-cell", "--objective", "glvfm"]), 2);
}

#[test]
fn divergence_exits_3_with_diagnostics() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    fs::write(sb.path("hot.toml"), format!("{SMALL}\n").replace("lr = 2e-3", "lr = 1e300")).unwrap();
    let out = sb.run(&["--config", "hot.toml", "train", "--data", data, "--out", "hot"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let diag = fs::read_to_string(sb.path("hot/diagnostics.txt")).unwrap();
    assert!(diag.contains("non-finite"), "{diag}");
}

#[test]
fn generate_counts_samples_and_is_deterministic() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    sb.ok(&["train", "--data", data, "--out", "run", "--steps", "5"]);
    let args = ["generate", "--checkpoint", "run", "--data", data, "--source", "centers", "--centers", "3", "--samples", "50"];
    let mut a = args.to_vec();
    a.extend(["--out", "g1.csv"]);
    sb.ok(&a);
    let mut b = args.to_vec();
    b.extend(["--out", "g2.csv"]);
    sb.ok(&b);
    assert_eq!(read(&sb.path("g1.csv")), read(&sb.path("g2.csv")));
    let k = nfkit::flow::load_model(&sb.path("run/final.ckpt")).unwrap().spec.k;
    let slides = load_slides(&sb.path("g1.csv")).unwrap();
    assert_eq!(slides.len(), 1);
    assert_eq!(slides[0].time_index, 1);
    assert_eq!(slides[0].len(), 50 * k);
    let ids: BTreeSet<u64> = slides[0].sample_ids.clone().unwrap().into_iter().collect();
    assert_eq!(ids.len(), 50);
    let mut c = args.to_vec();
    c.extend(["--out", "g3.csv", "--seed", "9"]);
    sb.ok(&c);
    assert_ne!(read(&sb.path("g1.csv")), read(&sb.path("g3.csv")));
}

#[test]
fn generate_chains_predictions() {
    let sb = Sandbox::new();
    let data = sb.dataset(3);
    sb.ok(&["train", "--data", data, "--out", "run", "--steps", "5"]);
    let out = sb.ok(&["generate", "--checkpoint", "run", "--data", data, "--out", "chain.csv", "--chain", "2", "--samples", "2"]);
    assert_eq!(out.lines().count(), 2, "{out}");
    let slides = load_slides(&sb.path("chain.csv")).unwrap();
    let times: Vec<usize> = slides.iter().map(|s| s.time_index).collect();
    assert_eq!(times, [1, 2]);
    assert_eq!(sb.code(&["generate", "--checkpoint", "run", "--data", data, "--out", "x.csv", "--chain", "3"]), 2);
}

#[test]
fn generate_rejects_a_dimension_mismatch() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    sb.ok(&["train", "--data", data, "--out", "run", "--steps", "0"]);
    let other = synth_generate(&SynthConfig { cells_per_slide: 100, feature_dim: 3, ..Default::default() }, 1).unwrap();
    nfkit::data::save_dataset(&sb.path("d3.csv"), &other).unwrap();
    assert_eq!(sb.code(&["generate", "--checkpoint", "run", "--data", "d3.csv", "--out", "x.csv"]), 2);
}

#[test]
fn oracle_evaluation_scores_zero_with_stable_keys() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    sb.ok(&["evaluate", "--oracle", "--data", data, "--out", "r1.toml", "--table", "t.csv"]);
    sb.ok(&["evaluate", "--oracle", "--data", data, "--out", "r2.toml", "--table", "t.csv"]);
    let text = fs::read_to_string(sb.path("r1.toml")).unwrap();
    let r = MetricsReport::from_toml(&text).unwrap();
    assert_eq!((r.psd, r.spd), (0.0, 0.0));
    assert_eq!(r.metadata.model_id, "oracle");
    assert_eq!(text, fs::read_to_string(sb.path("r2.toml")).unwrap());
    let keys: Vec<&str> = text.lines().filter_map(|l| l.split(" = ").next()).filter(|k| !k.is_empty()).collect();
    assert_eq!(
        keys,
        [
            "psd",
            "spd",
            "one_nn_f1",
            "[metadata]",
            "model_id",
            "dataset_id",
            "seed",
            "weighting",
            "generated_cells",
            "reference_cells",
            "classifier_f1",
            "[wasserstein]"
        ]
    );
    assert_eq!(fs::read_to_string(sb.path("t.csv")).unwrap().lines().count(), 3);
}

#[test]
fn evaluate_needs_a_checkpoint_or_the_oracle() {
    let sb = Sandbox::new();
    let data = sb.dataset(2);
    assert_eq!(sb.code(&["evaluate", "--data", data, "--out", "r.toml"]), 2);
    sb.ok(&["train", "--data", data, "--out", "run", "--steps", "0"]);
    sb.ok(&["evaluate", "--checkpoint", "run", "--data", data, "--out", "r.toml"]);
    let r = MetricsReport::from_toml(&fs::read_to_string(sb.path("r.toml")).unwrap()).unwrap();
    assert!(r.psd > 0.0 && r.spd > 0.0);
}

#[test]
fn plot_draws_one_point_per_cell() {
    let sb = Sandbox::new();
    fs::write(sb.path("one.csv"), "time,x,y,f0\n0,0.5,-1,2\n").unwrap();
    sb.ok(&["plot", "one.csv", "--out", "one.svg"]);
    let svg = fs::read_to_string(sb.path("one.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
    sb.ok(&["plot", "one.csv", "--out", "again.svg"]);
    assert_eq!(svg, fs::read_to_string(sb.path("again.svg")).unwrap());
}

#[test]
fn plot_overlays_contours_and_rejects_empty_input() {
    let sb = Sandbox::new();
    let slides = synth_generate(&SynthConfig { cells_per_slide: 60, feature_dim: 2, ..Default::default() }, 2).unwrap().slides;
    write_cell_table(&sb.path("cells.csv"), &slides).unwrap();
    sb.ok(&["plot", "cells.csv", "--out", "k.svg", "--kde", "--kde-sigma", "1.0", "--color-by", "sample-id"]);
    let svg = fs::read_to_string(sb.path("k.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 120);
    assert!(svg.contains("class=\"kde\""));
    fs::write(sb.path("empty.csv"), "time,x,y,f0\n").unwrap();
    assert_eq!(sb.code(&["plot", "empty.csv", "--out", "e.svg"]), 2);
}

#[test]
fn defaults_follow_the_reference_configuration() {
    let sb = Sandbox::new();
    let out = sb.run(&["defaults"]);
    assert!(out.status.success());
    let v: toml::Value = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let t = &v["train"];
    assert_eq!(t["coupling"]["lambda"].as_float(), Some(0.1));
    assert_eq!(t["coupling"]["m"].as_integer(), Some(256));
    assert_eq!(t["coupling"]["n"].as_integer(), Some(64));
    assert_eq!(t["coupling"]["k_regions"].as_integer(), Some(64));
    assert_eq!(t["instances"].as_integer(), Some(16));
    let n = &t["network"];
    assert_eq!(n["embed_dim"].as_integer(), Some(128));
    assert_eq!(n["heads"].as_integer(), Some(4));
    assert_eq!((n["encoder_layers"].as_integer(), n["decoder_layers"].as_integer()), (Some(2), Some(2)));
    assert_eq!(n["dropout"].as_float(), Some(0.1));
    assert_eq!(t["optimizer"]["lr"].as_float(), Some(2e-4));
    assert_eq!(t["optimizer"]["weight_decay"].as_float(), Some(1e-5));
    assert_eq!(v["preprocess"]["pca_components"].as_integer(), Some(50));
    fs::write(sb.path("defaults.toml"), toml::to_string(&v).unwrap()).unwrap();
    assert!(sb.run(&["--config", "defaults.toml", "synth", "--out", "d.csv", "--cells", "50"]).status.success());
}

#[test]
fn bench_oracle_preset_passes() {
    let sb = Sandbox::new();
    let out = sb.run(&["bench", "--preset", "oracle-smoke", "--out", "res"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = fs::read_to_string(sb.path("res/results.md")).unwrap();
    assert!(!md.contains("FAIL"));
    assert!(sb.path("res/results.csv").exists());
    assert_eq!(sb.run(&["bench", "--preset", "missing"]).status.code(), Some(2));
}
