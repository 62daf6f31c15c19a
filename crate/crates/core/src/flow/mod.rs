//! Flow-matching objectives, training batches, the training loop and Euler
//! generation for microenvironment models and the single-cell baseline.

mod generate;
mod loss;
mod net;
mod train;

pub use generate::{generate, generate_cfm, generate_vfm, integrate_cfm, integrate_vfm, GenerationConfig};
pub use loss::{batch_loss, loss_cfm, loss_glvfm, loss_gvfm, objective_loss, targets};
pub use net::{FlowModel, MlpConfig, MlpField, ModelSpec, Network};
pub use train::{load_model, read_loss_trace, resume, train, LossRecord, TrainConfig, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{extract_microenvironments, fix_env_size, kmeans_partition, modal_env_size, Dataset, Microenvironment, Slide};
use crate::error::{Error, Result};
use crate::ot::{batch_coupling, CouplingConfig, EnvPool};
use crate::transformer::EnvBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Velocity regression onto `M1 − Mz`.
    Cfm,
    /// Gaussian posterior mean: squared error on coordinates and features.
    Gvfm,
    /// Laplace coordinates (L1) plus Gaussian features (half squared error).
    Glvfm,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cfm => "cfm",
            Self::Gvfm => "gvfm",
            Self::Glvfm => "glvfm",
        })
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfm" => Ok(Self::Cfm),
            "gvfm" => Ok(Self::Gvfm),
            "glvfm" => Ok(Self::Glvfm),
            other => Err(Error::Parameter(format!("unknown objective '{other}' (expected cfm, gvfm or glvfm)"))),
        }
    }
}

/// Which environments a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Radius neighbourhoods with the transformer backbone.
    NicheFlow,
    /// Same backbone, clouds of `k` cells drawn from the centre's k-means region.
    RpcFlow,
    /// Single cells with an MLP velocity field, flowing from the source cell.
    SpFlow,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NicheFlow => "nicheflow",
            Self::RpcFlow => "rpcflow",
            Self::SpFlow => "spflow",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nicheflow" => Ok(Self::NicheFlow),
            "rpcflow" => Ok(Self::RpcFlow),
            "spflow" => Ok(Self::SpFlow),
            other => Err(Error::Parameter(format!("unknown variant '{other}' (expected nicheflow, rpcflow or spflow)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowObjective {
    pub kind: ObjectiveKind,
    /// Keeps `1/(1 − t + ε)` finite at `t = 1`.
    pub numeric_eps: f64,
}

impl FlowObjective {
    pub fn new(kind: ObjectiveKind, numeric_eps: f64) -> Result<Self> {
        if !(numeric_eps > 0.0) {
            return Err(Error::Parameter(format!("numeric epsilon {numeric_eps} must be positive")));
        }
        Ok(Self { kind, numeric_eps })
    }
}

/// Coordinates and features of `batch` environments with `k` slots each.
/// Masked slots hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub batch: usize,
    pub k: usize,
    pub dim: usize,
    /// `batch × k × 2`.
    pub coords: Vec<f64>,
    /// `batch × k × dim`.
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
}

impl EnvState {
    pub fn new(batch: usize, k: usize, dim: usize, mut coords: Vec<f64>, mut features: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = batch * k;
        if coords.len() != 2 * n || features.len() != dim * n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "state {batch}x{k} (dim {dim}) given {} coordinates, {} features, {} mask flags",
                coords.len(),
                features.len(),
                mask.len()
            )));
        }
        for (s, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
            coords[2 * s..2 * s + 2].iter_mut().for_each(|v| *v = 0.0);
            features[dim * s..dim * (s + 1)].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Self { batch, k, dim, coords, features, mask })
    }

    /// Materialises environments (all of size `k`) from their slides.
    pub fn from_envs(items: &[(&Slide, &Microenvironment)]) -> Result<Self> {
        let Some(&(first, e0)) = items.first() else {
            return Err(Error::Degenerate("no environments to materialise".into()));
        };
        let (k, dim) = (e0.members.len(), first.dim);
        let mut coords = Vec::with_capacity(items.len() * k * 2);
        let mut features = Vec::with_capacity(items.len() * k * dim);
        let mut mask = Vec::with_capacity(items.len() * k);
        for (slide, env) in items {
            if env.members.len() != k || slide.dim != dim {
                return Err(Error::Dimension(format!(
                    "environment of {} slots (dim {}) in a batch of {k} slots (dim {dim})",
                    env.members.len(),
                    slide.dim
                )));
            }
            for (&m, &valid) in env.members.iter().zip(&env.mask) {
                if valid {
                    coords.extend_from_slice(&slide.coords[m]);
                    features.extend_from_slice(slide.feature(m));
                } else {
                    coords.extend([0.0, 0.0]);
                    features.extend(std::iter::repeat_n(0.0, dim));
                }
                mask.push(valid);
            }
        }
        Self::new(items.len(), k, dim, coords, features, mask)
    }

    /// Standard normal coordinates and features on the valid slots.
    pub fn noise_like<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
        let coords = draw(self.coords.len());
        let features = draw(self.features.len());
        Self::new(self.batch, self.k, self.dim, coords, features, self.mask.clone()).expect("same shape")
    }

    /// Model input: features followed by the one-hot of `slide_position[b]`.
    pub fn to_batch(&self, slide_position: &[usize], num_timepoints: usize, time: Option<Vec<f64>>) -> Result<EnvBatch> {
        if slide_position.len() != self.batch {
            return Err(Error::Dimension(format!("{} time labels for {} environments", slide_position.len(), self.batch)));
        }
        if let Some(&bad) = slide_position.iter().find(|&&p| p >= num_timepoints) {
            return Err(Error::Parameter(format!("time label {bad} outside {num_timepoints} time points")));
        }
        let width = self.dim + num_timepoints;
        let mut f = Vec::with_capacity(self.batch * self.k * width);
        for b in 0..self.batch {
            for s in b * self.k..(b + 1) * self.k {
                f.extend_from_slice(&self.features[s * self.dim..(s + 1) * self.dim]);
                f.extend((0..num_timepoints).map(|t| if t == slide_position[b] { 1.0 } else { 0.0 }));
            }
        }
        EnvBatch::new(self.batch, self.k, width, f, self.coords.clone(), self.mask.clone(), time)
    }

    /// Row-major `[batch·k, 2 + dim]` with coordinates first (the head layout).
    pub fn joined(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mask.len() * (2 + self.dim));
        for s in 0..self.mask.len() {
            out.extend_from_slice(&self.coords[2 * s..2 * s + 2]);
            out.extend_from_slice(&self.features[self.dim * s..self.dim * (s + 1)]);
        }
        out
    }

    /// Inverse of [`EnvState::joined`] with this state's shape and mask.
    pub fn with_joined(&self, joined: &[f64]) -> Result<Self> {
        let w = 2 + self.dim;
        if joined.len() != self.mask.len() * w {
            return Err(Error::Dimension(format!("{} values for {} slots of width {w}", joined.len(), self.mask.len())));
        }
        let mut coords = Vec::with_capacity(self.coords.len());
        let mut features = Vec::with_capacity(self.features.len());
        for row in joined.chunks(w) {
            coords.extend_from_slice(&row[..2]);
            features.extend_from_slice(&row[2..]);
        }
        Self::new(self.batch, self.k, self.dim, coords, features, self.mask.clone())
    }

    /// Valid cells of every environment, pooled: (coords, row-major features).
    pub fn valid_cells(&self) -> (Vec<[f64; 2]>, Vec<f64>) {
        let mut c = Vec::new();
        let mut f = Vec::new();
        for (s, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            c.push([self.coords[2 * s], self.coords[2 * s + 1]]);
            f.extend_from_slice(&self.features[self.dim * s..self.dim * (s + 1)]);
        }
        (c, f)
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if (self.batch, self.k, self.dim) != (other.batch, other.k, other.dim) || self.mask != other.mask {
            return Err(Error::Dimension(format!(
                "states {}x{}x{} and {}x{}x{} differ in shape or mask",
                self.batch, self.k, self.dim, other.batch, other.k, other.dim
            )));
        }
        Ok(())
    }
}

/// `(1 − t_b)·Mz + t_b·M1` for each environment `b`.
pub fn interpolate(mz: &EnvState, m1: &EnvState, t: &[f64]) -> Result<EnvState> {
    mz.same_layout(m1)?;
    if t.len() != mz.batch {
        return Err(Error::Dimension(format!("{} times for {} environments", t.len(), mz.batch)));
    }
    if let Some(bad) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("interpolation time {bad} outside [0, 1]")));
    }
    let mix = |a: &[f64], b: &[f64], width: usize| -> Vec<f64> {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (&z, &x))| {
                let tb = t[i / (width * mz.k)];
                if tb == 0.0 {
                    z
                } else if tb == 1.0 {
                    x
                } else {
                    (1.0 - tb) * z + tb * x
                }
            })
            .collect()
    };
    EnvState::new(
        mz.batch,
        mz.k,
        mz.dim,
        mix(&mz.coords, &m1.coords, 2),
        mix(&mz.features, &m1.features, mz.dim),
        mz.mask.clone(),
    )
}

/// One training step's worth of paired, noised and interpolated environments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub m0: EnvState,
    pub m1: EnvState,
    /// Path start: Gaussian noise, or the source cell for the single-cell baseline.
    pub mz: EnvState,
    pub mt: EnvState,
    /// One time per environment (shared within an instance).
    pub t: Vec<f64>,
    pub source_position: Vec<usize>,
    pub target_position: Vec<usize>,
    pub num_timepoints: usize,
}

impl TrainBatch {
    pub fn source_batch(&self) -> Result<EnvBatch> {
        self.m0.to_batch(&self.source_position, self.num_timepoints, None)
    }

    pub fn noisy_batch(&self) -> Result<EnvBatch> {
        self.mt.to_batch(&self.target_position, self.num_timepoints, Some(self.t.clone()))
    }

    pub fn mean_t(&self) -> f64 {
        self.t.iter().sum::<f64>() / self.t.len() as f64
    }
}

/// Fixed-size environments of every slide plus their spatial regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideEnvs {
    pub variant: Variant,
    pub k: usize,
    pub envs: Vec<Vec<Microenvironment>>,
    /// Per slide: env indices grouped by k-means region.
    pub regions: Vec<Vec<Vec<usize>>>,
}

impl SlideEnvs {
    /// Builds the training environments of `variant`.
    ///
    /// Radius environments are brought to the modal size over all slides.
    /// The random-cloud variant keeps that size but fills each environment
    /// with the centre plus cells drawn uniformly from the centre's region.
    /// The single-cell variant uses one environment per cell.
    pub fn build(ds: &Dataset, variant: Variant, radius: f64, k_regions: usize, seed: u64) -> Result<Self> {
        if ds.num_timepoints() < 2 {
            return Err(Error::Parameter("training needs at least 2 time points".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, envs) = match variant {
            Variant::SpFlow => {
                let envs = ds
                    .slides
                    .iter()
                    .map(|s| {
                        (0..s.len())
                            .map(|i| Microenvironment { center: i, time_index: s.time_index, members: vec![i], mask: vec![true] })
                            .collect()
                    })
                    .collect();
                (1, envs)
            }
            _ => {
                let raw: Vec<Vec<Microenvironment>> =
                    ds.slides.iter().map(|s| extract_microenvironments(s, radius)).collect::<Result<_>>()?;
                let all: Vec<Microenvironment> = raw.iter().flatten().cloned().collect();
                let k = modal_env_size(&all)?;
                let envs = raw.iter().map(|e| fix_env_size(e, k, &mut rng)).collect::<Result<Vec<_>>>()?;
                (k, envs)
            }
        };
        let mut out = Vec::with_capacity(envs.len());
        let mut regions = Vec::with_capacity(envs.len());
        for (slide, envs) in ds.slides.iter().zip(envs) {
            let pts: Vec<[f64; 2]> = envs.iter().map(|e| slide.coords[e.center]).collect();
            let km = kmeans_partition(&pts, k_regions.clamp(1, pts.len()), rng.random())?;
            let envs = if variant == Variant::RpcFlow {
                let labels = &km.labels;
                envs.iter()
                    .map(|e| {
                        let region: Vec<usize> =
                            (0..slide.len()).filter(|&c| labels[c] == labels[e.center] && c != e.center).collect();
                        let take = (k - 1).min(region.len());
                        let mut members: Vec<usize> =
                            sample(&mut rng, region.len(), take).into_iter().map(|j| region[j]).collect();
                        members.push(e.center);
                        members.sort_unstable();
                        let n = members.len();
                        members.resize(k, e.center);
                        Microenvironment { center: e.center, time_index: e.time_index, members, mask: (0..k).map(|i| i < n).collect() }
                    })
                    .collect()
            } else {
                envs
            };
            regions.push(km.regions());
            out.push(envs);
        }
        Ok(Self { variant, k, envs: out, regions })
    }

    pub fn pools<'a>(&'a self, ds: &'a Dataset) -> Vec<EnvPool<'a>> {
        ds.slides
            .iter()
            .enumerate()
            .map(|(pos, slide)| EnvPool { slide, position: pos, envs: &self.envs[pos], regions: self.regions[pos].clone() })
            .collect()
    }
}

/// How a training batch is assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    /// Independent couplings per step, each with its own `t`.
    pub instances: usize,
    pub coupling: CouplingConfig,
    /// Start paths at the source state instead of Gaussian noise.
    pub from_source: bool,
}

/// Region-uniform env sampling → mini-batch OT coupling → noise → `t ~ U[0,1]`
/// → interpolation, repeated for each instance and concatenated.
pub fn sample_and_interpolate<R: Rng + ?Sized>(
    ds: &Dataset,
    pools: &[EnvPool],
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<TrainBatch> {
    let n_t = ds.num_timepoints();
    if n_t < 2 || pools.len() != n_t {
        return Err(Error::Parameter("need one environment pool per slide and at least 2 slides".into()));
    }
    if cfg.instances == 0 {
        return Err(Error::Parameter("at least one instance per batch".into()));
    }
    let mut src_items = Vec::new();
    let mut tgt_items = Vec::new();
    let (mut t, mut sp, mut tp) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.instances {
        let s = rng.random_range(0..n_t - 1);
        let pairs = batch_coupling(&pools[s], &pools[s + 1], &cfg.coupling, rng)?;
        let ti: f64 = rng.random();
        for (i, j) in pairs {
            src_items.push((pools[s].slide, &pools[s].envs[i]));
            tgt_items.push((pools[s + 1].slide, &pools[s + 1].envs[j]));
            t.push(ti);
            sp.push(s);
            tp.push(s + 1);
        }
    }
    let m0 = EnvState::from_envs(&src_items)?;
    let m1 = EnvState::from_envs(&tgt_items)?;
    let mz = if cfg.from_source {
        if m0.k != m1.k {
            return Err(Error::Contract("source-anchored paths need equal source and target sizes".into()));
        }
        EnvState::new(m1.batch, m1.k, m1.dim, m0.coords.clone(), m0.features.clone(), m1.mask.clone())?
    } else {
        m1.noise_like(rng)
    };
    let mt = interpolate(&mz, &m1, &t)?;
    Ok(TrainBatch { m0, m1, mz, mt, t, source_position: sp, target_position: tp, num_timepoints: n_t })
}
