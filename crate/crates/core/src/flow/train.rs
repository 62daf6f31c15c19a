use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, sample_and_interpolate, BatchConfig, FlowModel, ModelSpec, ObjectiveKind, SlideEnvs, TrainBatch, Variant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ot::CouplingConfig;
use crate::tensor::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Tape};
use crate::transformer::TransformerConfig;

const CONFIG_FILE: &str = "config.toml";
const LOSS_FILE: &str = "loss.csv";
const FINAL_FILE: &str = "final.ckpt";
const DIAGNOSTICS_FILE: &str = "diagnostics.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub variant: Variant,
    /// Feature dimension and time-point count are taken from the dataset.
    pub network: TransformerConfig,
    pub radius: f64,
    /// Step budget.
    pub steps: usize,
    /// Coupled source/target sets per step, each with its own `t`.
    pub instances: usize,
    pub coupling: CouplingConfig,
    pub optimizer: AdamWConfig,
    pub checkpoint_every: usize,
    /// Window for the early-stop test; 0 disables it.
    pub early_stop_window: usize,
    /// Stop when the windowed mean loss improves by less than this fraction.
    pub early_stop_min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Glvfm,
            variant: Variant::NicheFlow,
            network: TransformerConfig::default(),
            radius: 0.1,
            steps: 2000,
            instances: 16,
            coupling: CouplingConfig::default(),
            optimizer: AdamWConfig::default(),
            checkpoint_every: 500,
            early_stop_window: 200,
            early_stop_min_improvement: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::SpFlow && self.objective != ObjectiveKind::Cfm {
            return Err(Error::Parameter(format!("the per-cell baseline trains with cfm, not {}", self.objective)));
        }
        if self.instances == 0 || self.checkpoint_every == 0 {
            return Err(Error::Parameter("instances and checkpoint_every must be at least 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Parameter(format!("radius {} must be positive", self.radius)));
        }
        if !(self.early_stop_min_improvement >= 0.0) {
            return Err(Error::Parameter("early-stop improvement threshold must be non-negative".into()));
        }
        self.network.validate()
    }

    /// The config with dataset-derived network dimensions filled in.
    pub fn resolved(&self, ds: &Dataset) -> Self {
        let mut c = self.clone();
        c.network.feature_dim = ds.dim();
        c.network.num_timepoints = ds.num_timepoints();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean interpolation time of the step's batch.
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub config: TrainConfig,
    pub losses: Vec<LossRecord>,
    pub stopped_early: bool,
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.ckpt"))
}

/// Trains a model from scratch. With a run directory the config snapshot,
/// the loss trace and periodic checkpoints are written there.
pub fn train(ds: &Dataset, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = cfg.resolved(ds);
    cfg.validate()?;
    let envs = SlideEnvs::build(ds, cfg.variant, cfg.radius, cfg.coupling.k_regions, cfg.seed)?;
    let spec = ModelSpec {
        objective: cfg.objective,
        variant: cfg.variant,
        k: envs.k,
        radius: cfg.radius,
        network: cfg.network.clone(),
    };
    let model = FlowModel::new(spec, cfg.seed)?;
    let opt = AdamW::new(cfg.optimizer, model.store());
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(&cfg).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
        fs::write(dir.join(CONFIG_FILE), text)?;
        fs::write(dir.join(LOSS_FILE), "step,loss,t\n")?;
    }
    run(ds, cfg, &envs, model, opt, Vec::new(), run_dir)
}

/// Continues the run in `run_dir` from its latest periodic checkpoint,
/// optionally with a new step budget. The result equals an uninterrupted run.
pub fn resume(ds: &Dataset, run_dir: &Path, steps: Option<usize>) -> Result<TrainOutcome> {
    let text = fs::read_to_string(run_dir.join(CONFIG_FILE))?;
    let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let latest = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("checkpoint-")?.strip_suffix(".ckpt")?.parse::<usize>().ok()
        })
        .max()
        .ok_or_else(|| Error::Format(format!("no checkpoint in {}", run_dir.display())))?;
    let ckpt = read_checkpoint(&checkpoint_path(run_dir, latest))?;
    let model = FlowModel::from_checkpoint(&ckpt)?;
    let mut opt = AdamW::new(cfg.optimizer, model.store());
    ckpt.restore_optimizer(&mut opt, model.store())?;
    let mut losses = read_loss_trace(&run_dir.join(LOSS_FILE))?;
    if losses.len() < latest {
        return Err(Error::Format(format!("loss trace has {} rows, checkpoint is at step {latest}", losses.len())));
    }
    losses.truncate(latest);
    let mut out = String::from("step,loss,t\n");
    losses.iter().for_each(|r| out.push_str(&format_record(r)));
    fs::write(run_dir.join(LOSS_FILE), out)?;
    let envs = SlideEnvs::build(ds, cfg.variant, cfg.radius, cfg.coupling.k_regions, cfg.seed)?;
    if envs.k != model.spec.k {
        return Err(Error::Contract(format!("dataset gives environment size {}, checkpoint has {}", envs.k, model.spec.k)));
    }
    run(ds, cfg, &envs, model, opt, losses, Some(run_dir))
}

pub fn load_model(path: &Path) -> Result<FlowModel> {
    FlowModel::load(path)
}

fn format_record(r: &LossRecord) -> String {
    format!("{},{},{}\n", r.step, r.loss, r.t)
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: malformed loss row '{line}'", path.display(), n + 1));
        let mut it = line.split(',');
        let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let t = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push(LossRecord { step, loss, t });
    }
    Ok(out)
}

fn diagnostics(step: usize, loss: f64, batch: &TrainBatch) -> String {
    let x = batch.mt.joined();
    let finite: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    let max = finite.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = finite.iter().map(|v| v.abs()).sum::<f64>() / finite.len().max(1) as f64;
    format!(
        "loss {loss} at step {step}; mean t {:.4}; {} environments of {} slots; |Mt| max {max:.4e}, mean {mean:.4e}, {} non-finite",
        batch.mean_t(),
        batch.mt.batch,
        batch.mt.k,
        x.len() - finite.len()
    )
}

fn early_stop(losses: &[LossRecord], window: usize, min_improvement: f64) -> bool {
    let n = losses.len();
    if window == 0 || n < 2 * window || n % window != 0 {
        return false;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let prev = mean(&losses[n - 2 * window..n - window]);
    let cur = mean(&losses[n - window..]);
    prev - cur < min_improvement * prev.abs()
}

fn run(
    ds: &Dataset,
    cfg: TrainConfig,
    envs: &SlideEnvs,
    mut model: FlowModel,
    mut opt: AdamW<f64>,
    mut losses: Vec<LossRecord>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let pools = envs.pools(ds);
    let bcfg = BatchConfig {
        instances: cfg.instances,
        coupling: cfg.coupling.clone(),
        from_source: cfg.variant == Variant::SpFlow,
    };
    let mut trace = match run_dir {
        Some(dir) => Some(OpenOptions::new().append(true).open(dir.join(LOSS_FILE))?),
        None => None,
    };
    let save = |model: &FlowModel, opt: &AdamW<f64>, path: PathBuf| -> Result<()> {
        write_checkpoint(&path, &model.checkpoint(Some(opt))?)
    };
    let mut stopped_early = false;
    for step in losses.len()..cfg.steps {
        // One stream per step, so a resumed run draws what an uninterrupted one would.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64 + 1);
        let batch = sample_and_interpolate(ds, &pools, &bcfg, &mut rng)?;
        let diverged = |detail: String| -> Error {
            if let Some(dir) = run_dir {
                let _ = fs::write(dir.join(DIAGNOSTICS_FILE), format!("{detail}\n"));
            }
            Error::Diverged { step, detail }
        };
        // Non-finite values anywhere in the step abort the run with diagnostics.
        let blew_up = |e: Error, value: f64| match e {
            Error::NonFinite(msg) => diverged(format!("{msg}; {}", diagnostics(step, value, &batch))),
            other => other,
        };
        let tape = Tape::new();
        let (bound, loss) = batch_loss(&model, cfg.objective, &batch, &tape, Some(&mut rng as &mut dyn RngCore))
            .map_err(|e| blew_up(e, f64::NAN))?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(diverged(diagnostics(step, value, &batch)));
        }
        let grads = tape.backward(loss).map_err(|e| blew_up(e, value))?;
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate(&grads, &bound).map_err(|e| blew_up(e, value))?;
        opt.step(store).map_err(|e| blew_up(e, value))?;
        let rec = LossRecord { step, loss: value, t: batch.mean_t() };
        if let Some(f) = trace.as_mut() {
            f.write_all(format_record(&rec).as_bytes())?;
        }
        losses.push(rec);
        if step % 100 == 0 {
            log::info!("step {step}: loss {value:.5}");
        }
        if let Some(dir) = run_dir {
            if (step + 1) % cfg.checkpoint_every == 0 {
                save(&model, &opt, checkpoint_path(dir, step + 1))?;
            }
        }
        if early_stop(&losses, cfg.early_stop_window, cfg.early_stop_min_improvement) {
            log::info!("early stop after {} steps", step + 1);
            stopped_early = true;
            break;
        }
    }
    if let Some(dir) = run_dir {
        save(&model, &opt, dir.join(FINAL_FILE))?;
    }
    Ok(TrainOutcome { model, config: cfg, losses, stopped_early })
}
