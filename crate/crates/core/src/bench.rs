//! Scripted experiments: a dataset recipe, a model matrix, a seed list and
//! pass/fail thresholds, run end to end and aggregated into tables.
//!
//! Everything written by [`run_experiment`] is a pure function of the spec;
//! wall-clock timing only goes to the log.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{preprocess, synth_generate, Dataset, PreprocessOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::flow::{train, EnvState, LossRecord, ObjectiveKind, TrainConfig, Variant};
use crate::metrics::{EvalConfig, Evaluator, MetricsReport};

/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "NFKIT_THREADS";

/// Worker cap from `NFKIT_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psd,
    Spd,
    OneNnF1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psd, Metric::Spd, Metric::OneNnF1];

    pub fn of(self, r: &MetricsReport) -> Option<f64> {
        match self {
            Metric::Psd => Some(r.psd),
            Metric::Spd => Some(r.spd),
            Metric::OneNnF1 => r.one_nn_f1,
        }
    }

    pub fn lower_is_better(self) -> bool {
        !matches!(self, Metric::OneNnF1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psd => "PSD",
            Metric::Spd => "SPD",
            Metric::OneNnF1 => "1NN-F1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelEntry {
    Flow { label: String, objective: ObjectiveKind, variant: Variant },
    /// Returns the observed next slide as its prediction.
    Oracle { label: String },
}

impl ModelEntry {
    pub fn label(&self) -> &str {
        match self {
            ModelEntry::Flow { label, .. } | ModelEntry::Oracle { label } => label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Threshold {
    /// On every seed the trained value is at most `max_ratio` times the value
    /// of the same model at initialization. Lower-is-better metrics only.
    VsUntrained { criterion: String, model: String, metric: Metric, max_ratio: f64 },
    /// On every seed the value is at least `value`.
    AtLeast { criterion: String, model: String, metric: Metric, value: f64 },
    /// On every seed the value is at most `value`.
    AtMost { criterion: String, model: String, metric: Metric, value: f64 },
    /// The mean over seeds of `model` is no worse than that of `than`.
    NotWorse { criterion: String, model: String, than: String, metric: Metric },
}

impl Threshold {
    pub fn criterion(&self) -> &str {
        match self {
            Threshold::VsUntrained { criterion, .. }
            | Threshold::AtLeast { criterion, .. }
            | Threshold::AtMost { criterion, .. }
            | Threshold::NotWorse { criterion, .. } => criterion,
        }
    }

    fn models(&self) -> Vec<&str> {
        match self {
            Threshold::VsUntrained { model, .. } | Threshold::AtLeast { model, .. } | Threshold::AtMost { model, .. } => {
                vec![model]
            }
            Threshold::NotWorse { model, than, .. } => vec![model, than],
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Threshold::VsUntrained { model, metric, max_ratio, .. } => {
                format!("{} of {model} at most {max_ratio} x its initialization value on every seed", metric.name())
            }
            Threshold::AtLeast { model, metric, value, .. } => {
                format!("{} of {model} at least {value} on every seed", metric.name())
            }
            Threshold::AtMost { model, metric, value, .. } => {
                format!("{} of {model} at most {value} on every seed", metric.name())
            }
            Threshold::NotWorse { model, than, metric, .. } => {
                format!("mean {} of {model} no worse than {than}", metric.name())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Every seed draws its own dataset and trains its own models.
    pub seeds: Vec<u64>,
    pub dataset: SynthConfig,
    #[serde(default)]
    pub preprocess: PreprocessOptions,
    /// Shared training settings; objective, variant and seed come from the
    /// model entry and the run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub thresholds: Vec<Threshold>,
}

/// Label of the initialization row kept for [`Threshold::VsUntrained`].
pub fn init_label(label: &str) -> String {
    format!("{label} (init)")
}

fn slug(label: &str) -> String {
    let s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Small transformer and coupling sizes that train in about a minute per
/// model on one core.
pub fn desk_train_config() -> TrainConfig {
    let mut t = TrainConfig { steps: 2000, instances: 8, early_stop_window: 0, ..Default::default() };
    t.network.embed_dim = 32;
    t.network.mlp_hidden = 64;
    t.network.heads = 2;
    t.network.encoder_layers = 1;
    t.network.decoder_layers = 1;
    t.coupling.m = 64;
    t.coupling.n = 16;
    t.optimizer.lr = 1e-3;
    t
}

/// Synthetic features are Gaussian, so count normalization and log1p are off.
fn synthetic_preprocess() -> PreprocessOptions {
    PreprocessOptions { normalize: false, log1p: false, pca_components: None, ..Default::default() }
}

impl ExperimentSpec {
    pub const PRESETS: [&'static str; 3] = ["drift-ordering", "oracle-smoke", "full-matrix"];

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "drift-ordering" => Some(Self::drift_ordering()),
            "oracle-smoke" => Some(Self::oracle_smoke()),
            "full-matrix" => Some(Self::full_matrix()),
            _ => None,
        }
    }

    /// Environment model against its own initialization and against the
    /// per-cell baseline on two drifting blobs.
    pub fn drift_ordering() -> Self {
        let glvfm = "nicheflow-glvfm".to_string();
        let spflow = "spflow".to_string();
        let vs_init = |metric| Threshold::VsUntrained {
            criterion: "trained-vs-init".into(),
            model: glvfm.clone(),
            metric,
            max_ratio: 0.25,
        };
        Self {
            name: "drift-ordering".into(),
            seeds: vec![1, 2, 3],
            dataset: SynthConfig::default(),
            preprocess: synthetic_preprocess(),
            train: desk_train_config(),
            eval: EvalConfig::default(),
            models: vec![
                ModelEntry::Flow { label: glvfm.clone(), objective: ObjectiveKind::Glvfm, variant: Variant::NicheFlow },
                ModelEntry::Flow { label: spflow.clone(), objective: ObjectiveKind::Cfm, variant: Variant::SpFlow },
            ],
            thresholds: vec![
                vs_init(Metric::Psd),
                vs_init(Metric::Spd),
                Threshold::AtLeast { criterion: "type-fidelity".into(), model: glvfm.clone(), metric: Metric::OneNnF1, value: 0.85 },
                Threshold::NotWorse { criterion: "niche-vs-cell".into(), model: glvfm, than: spflow, metric: Metric::Spd },
            ],
        }
    }

    /// Plumbing check: the oracle reproduces the target slide exactly.
    pub fn oracle_smoke() -> Self {
        let mut eval = EvalConfig { compute_wasserstein: false, ..Default::default() };
        eval.classifier.hidden = 32;
        eval.classifier.max_epochs = 30;
        let oracle = "oracle".to_string();
        Self {
            name: "oracle-smoke".into(),
            seeds: vec![1, 2, 3],
            dataset: SynthConfig { cells_per_slide: 200, ..Default::default() },
            preprocess: synthetic_preprocess(),
            train: desk_train_config(),
            eval,
            models: vec![ModelEntry::Oracle { label: oracle.clone() }],
            thresholds: vec![
                Threshold::AtMost { criterion: "oracle-psd".into(), model: oracle.clone(), metric: Metric::Psd, value: 0.0 },
                Threshold::AtMost { criterion: "oracle-spd".into(), model: oracle.clone(), metric: Metric::Spd, value: 0.0 },
                Threshold::AtLeast { criterion: "oracle-f1".into(), model: oracle, metric: Metric::OneNnF1, value: 0.9 },
            ],
        }
    }

    /// Every objective with both environment variants, plus the per-cell baseline.
    pub fn full_matrix() -> Self {
        let mut models = Vec::new();
        for variant in [Variant::NicheFlow, Variant::RpcFlow] {
            for objective in [ObjectiveKind::Cfm, ObjectiveKind::Gvfm, ObjectiveKind::Glvfm] {
                models.push(ModelEntry::Flow { label: format!("{variant}-{objective}"), objective, variant });
            }
        }
        models.push(ModelEntry::Flow { label: "spflow".into(), objective: ObjectiveKind::Cfm, variant: Variant::SpFlow });
        let mut spec = Self::drift_ordering();
        spec.name = "full-matrix".into();
        spec.models = models;
        spec
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("experiment spec: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("experiment spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.name.trim().is_empty() {
            return bad("experiment needs a name".into());
        }
        if self.seeds.is_empty() || self.models.is_empty() {
            return bad(format!("experiment '{}' needs at least one seed and one model", self.name));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let mut slugs = BTreeSet::new();
        for m in &self.models {
            if m.label().trim().is_empty() || !slugs.insert(slug(m.label())) {
                return bad(format!("model label '{}' is empty or collides with another", m.label()));
            }
            if let ModelEntry::Flow { objective, variant, .. } = m {
                TrainConfig { objective: *objective, variant: *variant, ..self.train.clone() }.validate()?;
            }
        }
        for th in &self.thresholds {
            if th.criterion().trim().is_empty() {
                return bad(format!("threshold '{}' names no criterion", th.describe()));
            }
            for label in th.models() {
                let Some(entry) = self.models.iter().find(|m| m.label() == label) else {
                    return bad(format!("threshold '{}' refers to unknown model '{label}'", th.describe()));
                };
                if let Threshold::VsUntrained { metric, max_ratio, .. } = th {
                    if !matches!(entry, ModelEntry::Flow { .. }) || !metric.lower_is_better() || !(*max_ratio > 0.0) {
                        return bad(format!("'{}' needs a trained model, a distance metric and a positive ratio", th.describe()));
                    }
                }
            }
        }
        self.dataset.validate()
    }

    fn wants_init(&self, label: &str) -> bool {
        self.thresholds.iter().any(|t| matches!(t, Threshold::VsUntrained { model, .. } if model == label))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// Model label, or [`init_label`] for an initialization row.
    pub label: String,
    pub seed: u64,
    pub report: MetricsReport,
    /// Empty for the oracle and initialization rows.
    pub losses: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub criterion: String,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub spec: ExperimentSpec,
    /// Ordered by seed, then by model entry.
    pub runs: Vec<RunRecord>,
    pub checks: Vec<CheckResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn run(&self, label: &str, seed: u64) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.label == label && r.seed == seed)
    }

    /// Row labels in table order.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for m in &self.spec.models {
            out.push(m.label().to_string());
            if self.spec.wants_init(m.label()) {
                out.push(init_label(m.label()));
            }
        }
        out
    }

    /// Per-seed values in seed order; `None` when any run lacks the metric.
    pub fn values(&self, label: &str, metric: Metric) -> Option<Vec<f64>> {
        self.spec.seeds.iter().map(|&s| self.run(label, s).and_then(|r| metric.of(&r.report))).collect()
    }

    pub fn markdown(&self) -> String {
        let seeds: Vec<String> = self.spec.seeds.iter().map(|s| s.to_string()).collect();
        let mut md = format!("# {}\n\nSeeds {}; values are mean ± sample standard deviation over seeds.\n\n", self.spec.name, seeds.join(", "));
        md.push_str("| model | PSD | SPD | 1NN-F1 |\n|---|---|---|---|\n");
        for label in self.labels() {
            let cells: Vec<String> = Metric::ALL
                .iter()
                .map(|&m| match self.values(&label, m) {
                    Some(v) => {
                        let (mean, std) = mean_std(&v);
                        format!("{mean:.5} ± {std:.5}")
                    }
                    None => "n/a".into(),
                })
                .collect();
            let _ = writeln!(md, "| {label} | {} |", cells.join(" | "));
        }
        if !self.checks.is_empty() {
            md.push_str("\n| criterion | check | result | detail |\n|---|---|---|---|\n");
            for c in &self.checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                let _ = writeln!(md, "| {} | {} | {verdict} | {} |", c.criterion, c.description, c.detail);
            }
        }
        md
    }

    /// One row per run, full precision.
    pub fn csv(&self) -> String {
        let mut out = String::from("model,seed,psd,spd,one_nn_f1,final_loss\n");
        let labels = self.labels();
        for &seed in &self.spec.seeds {
            for label in &labels {
                let Some(r) = self.run(label, seed) else { continue };
                let f1 = r.report.one_nn_f1.map(|v| v.to_string()).unwrap_or_default();
                let loss = r.losses.last().map(|l| l.loss.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{label},{seed},{},{},{f1},{loss}", r.report.psd, r.report.spd);
            }
        }
        out
    }

    fn check(&self, th: &Threshold) -> CheckResult {
        let fmt = |v: f64| format!("{v:.5}");
        let (passed, detail) = match th {
            Threshold::VsUntrained { model, metric, max_ratio, .. } => {
                match (self.values(model, *metric), self.values(&init_label(model), *metric)) {
                    (Some(t), Some(i)) => {
                        let parts: Vec<String> = self
                            .spec
                            .seeds
                            .iter()
                            .zip(t.iter().zip(&i))
                            .map(|(s, (a, b))| format!("seed {s}: {} vs {} (ratio {:.3})", fmt(*a), fmt(*b), a / b))
                            .collect();
                        (t.iter().zip(&i).all(|(a, b)| *a <= max_ratio * b), parts.join("; "))
                    }
                    _ => (false, "metric unavailable".into()),
                }
            }
            Threshold::AtLeast { model, metric, value, .. } | Threshold::AtMost { model, metric, value, .. } => {
                let at_least = matches!(th, Threshold::AtLeast { .. });
                match self.values(model, *metric) {
                    Some(v) => {
                        let ok = v.iter().all(|x| if at_least { x >= value } else { x <= value });
                        let parts: Vec<String> = self.spec.seeds.iter().zip(&v).map(|(s, x)| format!("seed {s}: {}", fmt(*x))).collect();
                        (ok, parts.join("; "))
                    }
                    None => (false, "metric unavailable".into()),
                }
            }
            Threshold::NotWorse { model, than, metric, .. } => match (self.values(model, *metric), self.values(than, *metric)) {
                (Some(a), Some(b)) => {
                    let (ma, mb) = (mean_std(&a).0, mean_std(&b).0);
                    let ok = if metric.lower_is_better() { ma <= mb } else { ma >= mb };
                    (ok, format!("{model} {} vs {than} {}", fmt(ma), fmt(mb)))
                }
                _ => (false, "metric unavailable".into()),
            },
        };
        CheckResult { criterion: th.criterion().to_string(), description: th.describe(), passed, detail }
    }
}

struct Job<'a> {
    seed_idx: usize,
    entry: &'a ModelEntry,
    init: bool,
}

impl Job<'_> {
    fn label(&self) -> String {
        if self.init {
            init_label(self.entry.label())
        } else {
            self.entry.label().to_string()
        }
    }
}

/// The observed next slide as one cell per environment.
fn next_slide(ds: &Dataset, s: usize) -> Result<EnvState> {
    let slide = &ds.slides[s + 1];
    let n = slide.len();
    EnvState::new(n, 1, slide.dim, slide.coords.iter().flatten().copied().collect(), slide.features.clone(), vec![true; n])
}

fn run_job(spec: &ExperimentSpec, ds: &Dataset, ev: &Evaluator, job: &Job, seed: u64, out: Option<&Path>) -> Result<RunRecord> {
    let label = job.label();
    let (mut report, losses) = match job.entry {
        ModelEntry::Oracle { .. } => {
            let radius = spec.eval.radius.unwrap_or(spec.train.radius);
            (ev.evaluate_with(radius, None, |s, _| next_slide(ds, s))?, Vec::new())
        }
        ModelEntry::Flow { objective, variant, .. } => {
            let cfg = TrainConfig {
                objective: *objective,
                variant: *variant,
                seed,
                steps: if job.init { 0 } else { spec.train.steps },
                ..spec.train.clone()
            };
            let dir = match out {
                Some(o) if !job.init => Some(o.join("runs").join(format!("{}-seed{seed}", slug(&label)))),
                _ => None,
            };
            let outcome = train(ds, &cfg, dir.as_deref())?;
            let report = ev.evaluate(&outcome.model)?;
            (report, if job.init { Vec::new() } else { outcome.losses })
        }
    };
    report.metadata.model_id = label.clone();
    Ok(RunRecord { label, seed, report, losses })
}

fn log_path(out: Option<&Path>, label: &str, seed: u64) -> Option<PathBuf> {
    out.map(|o| o.join("logs").join(format!("{}-seed{seed}.log", slug(label))))
}

/// Runs the model matrix over every seed, concurrently up to
/// [`worker_threads`], and checks the thresholds. With `out_dir` the tables
/// (`results.md`, `results.csv`), one report per run, the training run
/// directories and per-run logs are written there.
///
/// A failing run makes the whole experiment fail; the error names the run
/// and the log that holds its message.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    spec.validate()?;
    if let Some(o) = out_dir {
        for sub in ["logs", "reports", "runs"] {
            fs::create_dir_all(o.join(sub))?;
        }
        fs::write(o.join("spec.toml"), spec.to_toml()?)?;
    }
    let started = Instant::now();
    let mut datasets = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let raw = synth_generate(&spec.dataset, seed)?;
        let ds = preprocess(&raw, &PreprocessOptions { seed, ..spec.preprocess.clone() })?;
        datasets.push(ds);
    }
    let mut evaluators = Vec::with_capacity(spec.seeds.len());
    for (ds, &seed) in datasets.iter().zip(&spec.seeds) {
        let cfg = EvalConfig { dataset_id: Some(format!("{}-seed{seed}", spec.name)), ..spec.eval.clone() };
        evaluators.push(Evaluator::new(ds, cfg, seed)?);
    }
    let mut jobs = Vec::new();
    for seed_idx in 0..spec.seeds.len() {
        for entry in &spec.models {
            jobs.push(Job { seed_idx, entry, init: false });
            if spec.wants_init(entry.label()) {
                jobs.push(Job { seed_idx, entry, init: true });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = worker_threads().min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let seed = spec.seeds[job.seed_idx];
                let t0 = Instant::now();
                let r = run_job(spec, &datasets[job.seed_idx], &evaluators[job.seed_idx], job, seed, out_dir);
                log::info!("{} seed {seed}: {:.1?} ({})", job.label(), t0.elapsed(), if r.is_ok() { "ok" } else { "failed" });
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    let mut failure = None;
    for (job, slot) in jobs.iter().zip(results.into_inner().expect("result slots")) {
        let seed = spec.seeds[job.seed_idx];
        let label = job.label();
        let log = log_path(out_dir, &label, seed);
        let r = slot.expect("every job ran");
        let text = match &r {
            Ok(rec) => {
                let mut t = format!("{label} seed {seed}: ok\n");
                if let Some(l) = rec.losses.last() {
                    let _ = writeln!(t, "{} training steps, final loss {}", rec.losses.len(), l.loss);
                }
                let _ = writeln!(t, "psd {} spd {} one_nn_f1 {:?}", rec.report.psd, rec.report.spd, rec.report.one_nn_f1);
                t
            }
            Err(e) => format!("{label} seed {seed}: failed\n{e}\n{e:?}\n"),
        };
        if let Some(p) = &log {
            fs::write(p, text)?;
        }
        match r {
            Ok(rec) => {
                if let Some(o) = out_dir {
                    let name = format!("{}-seed{seed}.toml", slug(&label));
                    fs::write(o.join("reports").join(name), rec.report.to_toml()?)?;
                }
                runs.push(rec);
            }
            Err(e) if failure.is_none() => {
                failure = Some(Error::RunFailed {
                    run: format!("{label} seed {seed}"),
                    detail: e.to_string(),
                    log: log.map_or_else(|| "not written without an output directory".into(), |p| p.display().to_string()),
                });
            }
            Err(_) => {}
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let mut outcome = ExperimentOutcome { spec: spec.clone(), runs, checks: Vec::new() };
    outcome.checks = spec.thresholds.iter().map(|t| outcome.check(t)).collect();
    if let Some(o) = out_dir {
        fs::write(o.join("results.md"), outcome.markdown())?;
        fs::write(o.join("results.csv"), outcome.csv())?;
    }
    log::info!("experiment {} finished in {:.1?}", spec.name, started.elapsed());
    Ok(outcome)
}
