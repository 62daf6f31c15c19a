use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvState, FlowModel, ObjectiveKind, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub euler_steps: usize,
    pub numeric_eps: f64,
    pub seed: u64,
    /// Environments integrated together; does not affect results.
    pub chunk: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { euler_steps: 100, numeric_eps: 1e-4, seed: 0, chunk: 64 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.euler_steps == 0 || self.chunk == 0 {
            return Err(Error::Parameter("euler_steps and chunk must be at least 1".into()));
        }
        if !(self.numeric_eps > 0.0) {
            return Err(Error::Parameter(format!("numeric epsilon {} must be positive", self.numeric_eps)));
        }
        Ok(())
    }
}

/// Euler integration of `dM/dt = field(M, t)` from `start` at `t = 0` to `t = 1`.
/// The field returns values in head layout (see [`EnvState::joined`]).
pub fn integrate_cfm<F>(start: &EnvState, steps: usize, mut field: F) -> Result<EnvState>
where
    F: FnMut(&EnvState, f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::Parameter("at least one Euler step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut state = start.clone();
    let mut x = start.joined();
    for i in 0..steps {
        let v = field(&state, i as f64 * dt)?;
        if v.len() != x.len() {
            return Err(Error::Dimension(format!("field returned {} values for a state of {}", v.len(), x.len())));
        }
        x.iter_mut().zip(&v).for_each(|(a, b)| *a += dt * b);
        if x.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("state after Euler step {} of {steps}", i + 1)));
        }
        state = start.with_joined(&x)?;
    }
    Ok(state)
}

/// Euler integration of the mean-difference field `(μ(M, t) − M)/(1 − t + ε)`.
pub fn integrate_vfm<F>(start: &EnvState, steps: usize, eps: f64, mut mean: F) -> Result<EnvState>
where
    F: FnMut(&EnvState, f64) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("numeric epsilon {eps} must be positive")));
    }
    integrate_cfm(start, steps, |state, t| {
        let mu = mean(state, t)?;
        let scale = 1.0 / (1.0 - t + eps);
        Ok(mu.iter().zip(state.joined()).map(|(m, x)| (m - x) * scale).collect())
    })
}

fn envs_range(s: &EnvState, lo: usize, hi: usize) -> EnvState {
    let k = s.k;
    EnvState {
        batch: hi - lo,
        k,
        dim: s.dim,
        coords: s.coords[lo * k * 2..hi * k * 2].to_vec(),
        features: s.features[lo * k * s.dim..hi * k * s.dim].to_vec(),
        mask: s.mask[lo * k..hi * k].to_vec(),
    }
}

fn append(acc: &mut Option<EnvState>, part: EnvState) {
    match acc {
        None => *acc = Some(part),
        Some(a) => {
            a.batch += part.batch;
            a.coords.extend(part.coords);
            a.features.extend(part.features);
            a.mask.extend(part.mask);
        }
    }
}

/// Predicted successors of `source` (slide positions `source_position`), one
/// generated environment per source environment.
///
/// Environment models start from standard normal noise with all `k` slots
/// valid. The per-cell model flows every valid source cell on its own,
/// starting from the cell itself, and keeps the source layout.
pub fn generate(
    model: &FlowModel,
    source: &EnvState,
    source_position: &[usize],
    num_timepoints: usize,
    cfg: &GenerationConfig,
) -> Result<EnvState> {
    cfg.validate()?;
    if source_position.len() != source.batch {
        return Err(Error::Dimension(format!("{} positions for {} environments", source_position.len(), source.batch)));
    }
    if source.dim != model.spec.network.feature_dim {
        return Err(Error::Dimension(format!(
            "model expects {} features, source has {}",
            model.spec.network.feature_dim, source.dim
        )));
    }
    if let Some(&p) = source_position.iter().find(|&&p| p + 1 >= num_timepoints) {
        return Err(Error::Contract(format!("slide position {p} has no successor among {num_timepoints} time points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (src, pos, start) = if model.spec.variant == Variant::SpFlow {
        let cells = EnvState { batch: source.batch * source.k, k: 1, ..source.clone() };
        let pos: Vec<usize> = source_position.iter().flat_map(|&p| std::iter::repeat_n(p, source.k)).collect();
        (cells.clone(), pos, cells)
    } else {
        let k = model.spec.k;
        let shape = EnvState::new(
            source.batch,
            k,
            source.dim,
            vec![0.0; source.batch * k * 2],
            vec![0.0; source.batch * k * source.dim],
            vec![true; source.batch * k],
        )?;
        (source.clone(), source_position.to_vec(), shape.noise_like(&mut rng))
    };
    let mut out = None;
    for lo in (0..src.batch).step_by(cfg.chunk) {
        let hi = (lo + cfg.chunk).min(src.batch);
        let src_batch = envs_range(&src, lo, hi).to_batch(&pos[lo..hi], num_timepoints, None)?;
        let tgt: Vec<usize> = pos[lo..hi].iter().map(|p| p + 1).collect();
        let head = model.conditioned(&src_batch)?;
        let predict = |state: &EnvState, t: f64| head(&state.to_batch(&tgt, num_timepoints, Some(vec![t; state.batch]))?);
        let begin = envs_range(&start, lo, hi);
        let end = match model.spec.objective {
            ObjectiveKind::Cfm => integrate_cfm(&begin, cfg.euler_steps, predict)?,
            _ => integrate_vfm(&begin, cfg.euler_steps, cfg.numeric_eps, predict)?,
        };
        append(&mut out, end);
    }
    let out = out.ok_or_else(|| Error::Degenerate("no source environments".into()))?;
    if model.spec.variant == Variant::SpFlow {
        return EnvState::new(source.batch, source.k, source.dim, out.coords, out.features, source.mask.clone());
    }
    Ok(out)
}

/// [`generate`] for a velocity-field model.
pub fn generate_cfm(
    model: &FlowModel,
    source: &EnvState,
    source_position: &[usize],
    num_timepoints: usize,
    cfg: &GenerationConfig,
) -> Result<EnvState> {
    if model.spec.objective != ObjectiveKind::Cfm {
        return Err(Error::Contract(format!("model trained with {} predicts a mean, not a velocity", model.spec.objective)));
    }
    generate(model, source, source_position, num_timepoints, cfg)
}

/// [`generate`] for a posterior-mean model.
pub fn generate_vfm(
    model: &FlowModel,
    source: &EnvState,
    source_position: &[usize],
    num_timepoints: usize,
    cfg: &GenerationConfig,
) -> Result<EnvState> {
    if model.spec.objective == ObjectiveKind::Cfm {
        return Err(Error::Contract("model trained with cfm predicts a velocity, not a mean".into()));
    }
    generate(model, source, source_position, num_timepoints, cfg)
}
