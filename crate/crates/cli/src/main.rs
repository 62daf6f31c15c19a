//! `nfkit` command-line driver.
//!
//! Exit codes: 0 ok, 2 usage or configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nfkit::bench::{run_experiment, ExperimentSpec};
use nfkit::data::{
    envs_at, extract_microenvironments, fix_env_size, load_dataset, load_slides, modal_env_size, preprocess, save_dataset,
    synth_generate, write_cell_table, Dataset, PreprocessOptions, Slide, SynthConfig,
};
use nfkit::flow::{generate, load_model, resume, train, EnvState, FlowModel, GenerationConfig, ObjectiveKind, TrainConfig, Variant};
use nfkit::metrics::{grid_env_state, EvalConfig, Evaluator, MetricsReport};
use nfkit::plot::{scatter_svg, ColorBy, PlotConfig};
use nfkit::spatial::KdTree;

/// All tunables in one file; command-line flags override them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    synth: SynthConfig,
    preprocess: PreprocessOptions,
    train: TrainConfig,
    generate: GenerationConfig,
    eval: EvalConfig,
    plot: PlotConfig,
}

#[derive(Parser)]
#[command(name = "nfkit", version, about = "Flow matching over spatial cell slides")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file (see `nfkit defaults`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic drifting-blob dataset.
    Synth(SynthArgs),
    /// Apply preprocessing stages to a dataset.
    Preprocess(PreprocessArgs),
    /// Train a flow model into a run directory.
    Train(TrainArgs),
    /// Generate successor slides from a checkpoint.
    Generate(GenerateArgs),
    /// Score a checkpoint against the observed next slides.
    Evaluate(EvaluateArgs),
    /// Scatter plot of one or more cell tables as SVG.
    Plot(PlotArgs),
    /// Run a scripted experiment and its threshold checks.
    Bench(BenchArgs),
    /// Print the default config file.
    Defaults,
}

#[derive(Args)]
struct SynthArgs {
    /// Output cell table; metadata goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timepoints: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep this fraction of cells per slide.
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long)]
    skip_normalize: bool,
    #[arg(long)]
    skip_log: bool,
    /// PCA components; 0 skips PCA.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    skip_standardize_features: bool,
    #[arg(long)]
    skip_standardize_coords: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Cfm,
    Gvfm,
    Glvfm,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    /// Radius microenvironments.
    Niche,
    /// Random point clouds from the centre's region (RPCFlow).
    RandomCloud,
    /// Single cells (SPFlow).
    PerCell,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the config snapshot, loss trace and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the config value, or cfm for the per-cell variant.
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    steps: Option<usize>,
    /// Continue the run in `--out` from its latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    /// Regular grid of centres.
    Grid,
    /// One environment per cell.
    All,
    /// The cells listed with `--centers`.
    Centers,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint file, or a run directory holding `final.ckpt`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Source slide position.
    #[arg(long, default_value_t = 0)]
    time: usize,
    #[arg(long, value_enum, default_value = "grid")]
    source: SourceArg,
    #[arg(long, value_delimiter = ',')]
    centers: Vec<usize>,
    /// Independent generations per source environment.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Successive steps, each starting from the previous prediction.
    #[arg(long, default_value_t = 1)]
    chain: usize,
    #[arg(long)]
    euler_steps: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint file or run directory; not needed with `--oracle`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
    /// Score the observed next slides instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Append one delimited row to this table (header written when new).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    no_wasserstein: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColorArg {
    Type,
    SampleId,
}

#[derive(Args)]
struct PlotArgs {
    /// Cell tables; slides with the same time index share a panel.
    #[arg(required = true)]
    tables: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    color_by: Option<ColorArg>,
    /// Overlay KDE contours.
    #[arg(long)]
    kde: bool,
    #[arg(long)]
    kde_sigma: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Built-in experiment.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Experiment spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Defaults to `bench/results/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the spec's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

impl From<nfkit::Error> for Failure {
    fn from(e: nfkit::Error) -> Self {
        use nfkit::Error::*;
        match e {
            Dimension(_) | Contract(_) | Parameter(_) | Format(_) | Degenerate(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

trait Ctx<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> Ctx<T> for nfkit::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| match Failure::from(e) {
            Failure::Usage(e) => Failure::Usage(e.context(what())),
            Failure::Runtime(e) => Failure::Runtime(e.context(what())),
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(p) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
    toml::from_str(&text).with_context(|| format!("parsing {}", p.display())).map_err(usage)
}

/// Create the directory an output file goes into.
fn make_parent(p: &Path) -> Result<(), Failure> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display())).map_err(runtime),
        None => Ok(()),
    }
}

fn read_dataset(p: &Path) -> Result<Dataset, Failure> {
    load_dataset(p).ctx(|| format!("loading {}", p.display()))
}

fn read_model(p: &Path) -> Result<FlowModel, Failure> {
    let file = if p.is_dir() { p.join("final.ckpt") } else { p.to_path_buf() };
    load_model(&file).ctx(|| format!("loading checkpoint {}", file.display()))
}

fn counts(slides: &[Slide]) {
    for s in slides {
        println!("t={}: {} cells", s.time_index, s.len());
    }
}

fn cmd_synth(cfg: RunConfig, seed: u64, a: SynthArgs) -> Outcome {
    let mut sc = cfg.synth;
    sc.num_timepoints = a.timepoints.unwrap_or(sc.num_timepoints);
    sc.cells_per_slide = a.cells.unwrap_or(sc.cells_per_slide);
    let ds = synth_generate(&sc, seed)?;
    make_parent(&a.out)?;
    save_dataset(&a.out, &ds).ctx(|| format!("writing {}", a.out.display()))?;
    counts(&ds.slides);
    Ok(())
}

fn cmd_preprocess(cfg: RunConfig, seed: u64, a: PreprocessArgs) -> Outcome {
    let ds = read_dataset(&a.input)?;
    let mut o = cfg.preprocess;
    o.seed = seed;
    if a.subsample.is_some() {
        o.subsample = a.subsample;
    }
    o.normalize &= !a.skip_normalize;
    o.log1p &= !a.skip_log;
    if let Some(n) = a.pca {
        o.pca_components = (n > 0).then_some(n);
    }
    o.standardize_features &= !a.skip_standardize_features;
    o.standardize_coords &= !a.skip_standardize_coords;
    let out = preprocess(&ds, &o)?;
    make_parent(&a.out)?;
    save_dataset(&a.out, &out).ctx(|| format!("writing {}", a.out.display()))?;
    counts(&out.slides);
    println!("feature dimension {}", out.dim());
    Ok(())
}

fn cmd_train(cfg: RunConfig, seed: u64, a: TrainArgs) -> Outcome {
    let ds = read_dataset(&a.data)?;
    let outcome = if a.resume {
        resume(&ds, &a.out, a.steps).ctx(|| format!("resuming {}", a.out.display()))?
    } else {
        let mut tc = cfg.train;
        tc.seed = seed;
        if let Some(v) = a.variant {
            tc.variant = match v {
                VariantArg::Niche => Variant::NicheFlow,
                VariantArg::RandomCloud => Variant::RpcFlow,
                VariantArg::PerCell => Variant::SpFlow,
            };
        }
        tc.objective = match a.objective {
            Some(ObjectiveArg::Cfm) => ObjectiveKind::Cfm,
            Some(ObjectiveArg::Gvfm) => ObjectiveKind::Gvfm,
            Some(ObjectiveArg::Glvfm) => ObjectiveKind::Glvfm,
            None if tc.variant == Variant::SpFlow => ObjectiveKind::Cfm,
            None => tc.objective,
        };
        tc.steps = a.steps.unwrap_or(tc.steps);
        train(&ds, &tc, Some(&a.out)).ctx(|| format!("training into {}", a.out.display()))?
    };
    let last = outcome.losses.last().map_or("none".to_string(), |r| r.loss.to_string());
    println!(
        "{} {}: {} steps{}, final loss {last}",
        outcome.config.objective,
        outcome.config.variant,
        outcome.losses.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    println!("checkpoint {}", a.out.join("final.ckpt").display());
    Ok(())
}

/// `n` copies of every environment, copy-major.
fn replicate(s: &EnvState, n: usize) -> nfkit::Result<EnvState> {
    EnvState::new(s.batch * n, s.k, s.dim, s.coords.repeat(n), s.features.repeat(n), s.mask.repeat(n))
}

/// Source environments of `slide` sized for `model`.
fn source_envs(model: &FlowModel, slide: &Slide, eval: &EvalConfig, how: SourceArg, centers: &[usize], seed: u64) -> nfkit::Result<EnvState> {
    let radius = eval.radius.unwrap_or(model.spec.radius);
    let k = match model.spec.variant {
        Variant::SpFlow => modal_env_size(&extract_microenvironments(slide, radius)?)?,
        _ => model.spec.k,
    };
    let envs = match how {
        SourceArg::Grid => {
            let step = eval.grid_step.unwrap_or(radius);
            return grid_env_state(slide, step, radius, eval.target_count, Some(k), seed);
        }
        SourceArg::All => extract_microenvironments(slide, radius)?,
        SourceArg::Centers => {
            if let Some(&c) = centers.iter().find(|&&c| c >= slide.len()) {
                return Err(nfkit::Error::Parameter(format!("centre {c} outside a slide of {} cells", slide.len())));
            }
            if centers.is_empty() {
                return Err(nfkit::Error::Parameter("--source centers needs --centers".into()));
            }
            envs_at(slide, &KdTree::new(&slide.coords), centers, radius)?
        }
    };
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let envs = fix_env_size(&envs, k, &mut rng)?;
    let items: Vec<_> = envs.iter().map(|e| (slide, e)).collect();
    EnvState::from_envs(&items)
}

/// Valid cells of `state`, environment `e` tagged with `ids[e]`.
fn to_slide(state: &EnvState, ids: &[u64], time_index: usize) -> nfkit::Result<Slide> {
    let (k, d) = (state.k, state.dim);
    let (mut coords, mut features, mut sample_ids) = (Vec::new(), Vec::new(), Vec::new());
    for e in 0..state.batch {
        for j in 0..k {
            let slot = e * k + j;
            if state.mask[slot] {
                coords.push([state.coords[2 * slot], state.coords[2 * slot + 1]]);
                features.extend_from_slice(&state.features[slot * d..(slot + 1) * d]);
                sample_ids.push(ids[e]);
            }
        }
    }
    let mut s = Slide::new(time_index, coords, features, d)?;
    s.sample_ids = Some(sample_ids);
    Ok(s)
}

fn cmd_generate(cfg: RunConfig, seed: u64, a: GenerateArgs) -> Outcome {
    let model = read_model(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let t = ds.num_timepoints();
    if a.samples == 0 || a.chain == 0 {
        return Err(usage(anyhow!("--samples and --chain must be at least 1")));
    }
    if a.time + a.chain >= t {
        return Err(usage(anyhow!("{} chained steps from slide {} need more than the {t} time points", a.chain, a.time)));
    }
    let mut gcfg = cfg.generate;
    gcfg.euler_steps = a.euler_steps.unwrap_or(gcfg.euler_steps);
    // one source slide per sample; they start out identical
    let mut sources: Vec<Slide> = vec![ds.slides[a.time].clone(); a.samples];
    let mut outputs = Vec::new();
    for step in 0..a.chain {
        let pos = a.time + step;
        let mut parts = Vec::new();
        let mut ids = Vec::new();
        if step == 0 {
            let envs = source_envs(&model, &sources[0], &cfg.eval, a.source, &a.centers, seed).ctx(|| "selecting source environments".into())?;
            ids = (0..a.samples as u64).flat_map(|j| std::iter::repeat_n(j, envs.batch)).collect();
            parts.push(replicate(&envs, a.samples)?);
        } else {
            for (j, src) in sources.iter().enumerate() {
                let envs = source_envs(&model, src, &cfg.eval, SourceArg::Grid, &[], seed ^ j as u64)
                    .ctx(|| format!("environments of generated sample {j}"))?;
                ids.extend(std::iter::repeat_n(j as u64, envs.batch));
                parts.push(envs);
            }
        }
        let batch = concat(parts)?;
        let positions = vec![pos; batch.batch];
        let g = GenerationConfig { seed: seed.wrapping_add(step as u64), ..gcfg.clone() };
        let out = generate(&model, &batch, &positions, t, &g).ctx(|| format!("generating slide {}", pos + 1))?;
        let slide = to_slide(&out, &ids, pos + 1)?;
        sources = (0..a.samples as u64).map(|j| subset(&slide, j)).collect::<nfkit::Result<_>>()?;
        println!("t={}: {} generated cells", pos + 1, slide.len());
        outputs.push(slide);
    }
    make_parent(&a.out)?;
    write_cell_table(&a.out, &outputs).ctx(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn concat(parts: Vec<EnvState>) -> nfkit::Result<EnvState> {
    let (k, dim) = (parts[0].k, parts[0].dim);
    let batch = parts.iter().map(|p| p.batch).sum();
    let mut coords = Vec::new();
    let mut features = Vec::new();
    let mut mask = Vec::new();
    for p in parts {
        coords.extend(p.coords);
        features.extend(p.features);
        mask.extend(p.mask);
    }
    EnvState::new(batch, k, dim, coords, features, mask)
}

/// Cells of one sample, as a slide at the same time index.
fn subset(s: &Slide, id: u64) -> nfkit::Result<Slide> {
    let ids = s.sample_ids.as_deref().unwrap_or_default();
    let keep: Vec<usize> = (0..s.len()).filter(|&i| ids[i] == id).collect();
    let coords = keep.iter().map(|&i| s.coords[i]).collect();
    let features = keep.iter().flat_map(|&i| s.feature(i).to_vec()).collect();
    Slide::new(s.time_index, coords, features, s.dim)
}

fn cmd_evaluate(cfg: RunConfig, seed: u64, a: EvaluateArgs) -> Outcome {
    let ds = read_dataset(&a.data)?;
    let model = match (&a.checkpoint, a.oracle) {
        (_, true) => None,
        (Some(p), false) => Some(read_model(p)?),
        (None, false) => return Err(usage(anyhow!("--checkpoint is required unless --oracle is given"))),
    };
    let mut ecfg = cfg.eval;
    if a.no_wasserstein {
        ecfg.compute_wasserstein = false;
    }
    if ecfg.dataset_id.is_none() {
        ecfg.dataset_id = a.data.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    let report = run_evaluation(&ds, ecfg, seed, model.as_ref(), &cfg.train).map_err(runtime)?;
    make_parent(&a.out)?;
    std::fs::write(&a.out, report.to_toml().map_err(runtime)?).with_context(|| format!("writing {}", a.out.display())).map_err(runtime)?;
    if let Some(t) = &a.table {
        make_parent(t)?;
        let mut text = if t.exists() { String::new() } else { MetricsReport::table_header(',') + "\n" };
        text.push_str(&report.table_row(','));
        text.push('\n');
        use std::io::Write;
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(t)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .with_context(|| format!("appending to {}", t.display()))
            .map_err(runtime)?;
    }
    let f1 = report.one_nn_f1.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("psd {:.6} spd {:.6} 1nn-f1 {f1}", report.psd, report.spd);
    Ok(())
}

fn run_evaluation(ds: &Dataset, mut ecfg: EvalConfig, seed: u64, model: Option<&FlowModel>, train: &TrainConfig) -> nfkit::Result<MetricsReport> {
    match model {
        Some(m) => Evaluator::new(ds, ecfg, seed)?.evaluate(m),
        None => {
            ecfg.model_id.get_or_insert_with(|| "oracle".into());
            let radius = ecfg.radius.unwrap_or(train.radius);
            let ev = Evaluator::new(ds, ecfg, seed)?;
            ev.evaluate_with(radius, None, |s, _| {
                let next = &ds.slides[s + 1];
                let n = next.len();
                EnvState::new(n, 1, next.dim, next.coords.iter().flatten().copied().collect(), next.features.clone(), vec![true; n])
            })
        }
    }
}

fn cmd_plot(cfg: RunConfig, a: PlotArgs) -> Outcome {
    let mut slides = Vec::new();
    for p in &a.tables {
        slides.extend(load_slides(p).ctx(|| format!("loading {}", p.display()))?);
    }
    let mut pc = cfg.plot;
    if let Some(c) = a.color_by {
        pc.color_by = match c {
            ColorArg::Type => ColorBy::Type,
            ColorArg::SampleId => ColorBy::SampleId,
        };
    }
    if a.kde || a.kde_sigma.is_some() {
        let mut k = pc.kde.take().unwrap_or_default();
        k.sigma = a.kde_sigma.unwrap_or(k.sigma);
        pc.kde = Some(k);
    }
    let svg = scatter_svg(&slides, &pc)?;
    make_parent(&a.out)?;
    std::fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display())).map_err(runtime)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Outcome {
    let mut spec = match (&a.preset, &a.spec) {
        (Some(name), _) => ExperimentSpec::preset(name)
            .ok_or_else(|| usage(anyhow!("unknown preset '{name}'; known: {}", ExperimentSpec::PRESETS.join(", "))))?,
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            ExperimentSpec::from_toml(&text).ctx(|| format!("parsing {}", p.display()))?
        }
        (None, None) => return Err(usage(anyhow!("give --preset or --spec"))),
    };
    if !a.seeds.is_empty() {
        spec.seeds = a.seeds;
    }
    spec.validate()?;
    let out = a.out.unwrap_or_else(|| Path::new("bench/results").join(&spec.name));
    let outcome = run_experiment(&spec, Some(&out)).map_err(runtime)?;
    print!("{}", outcome.markdown());
    println!("\nresults in {}", out.display());
    if outcome.passed() {
        Ok(())
    } else {
        Err(runtime(anyhow!("{} of {} checks failed", outcome.checks.iter().filter(|c| !c.passed).count(), outcome.checks.len())))
    }
}

fn run(cli: Cli) -> Outcome {
    if let Command::Bench(a) = cli.command {
        return cmd_bench(a);
    }
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, seed, a),
        Command::Preprocess(a) => cmd_preprocess(cfg, seed, a),
        Command::Train(a) => cmd_train(cfg, seed, a),
        Command::Generate(a) => cmd_generate(cfg, seed, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, seed, a),
        Command::Plot(a) => cmd_plot(cfg, a),
        Command::Defaults => {
            print!("{}", toml::to_string(&RunConfig::default()).map_err(runtime)?);
            Ok(())
        }
        Command::Bench(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
