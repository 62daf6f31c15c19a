//! Pooled microenvironment representations, entropic OT and mini-batch pairing.

mod exact;
mod sinkhorn;

pub use exact::exact_transport_uniform;
pub use sinkhorn::{mean_cost, sinkhorn, CouplingPlan, SinkhornConfig};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{kmeans_partition, Microenvironment, Slide};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `[(1−λ)·mean coords ‖ λ·mean features]` of one microenvironment.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRep {
    pub vector: Vec<f64>,
    /// Centre cell of the source environment.
    pub env_id: usize,
    pub time_index: usize,
}

pub fn pooled_representation(slide: &Slide, env: &Microenvironment, lambda: f64) -> Result<PooledRep> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
    }
    let members: Vec<usize> = env.valid_members().collect();
    if members.is_empty() {
        return Err(Error::Degenerate(format!("environment centred at cell {} has no valid members", env.center)));
    }
    let n = members.len() as f64;
    let d = slide.dim;
    let mut v = vec![0.0; 2 + d];
    for &m in &members {
        v[0] += slide.coords[m][0];
        v[1] += slide.coords[m][1];
        v[2..].iter_mut().zip(slide.feature(m)).for_each(|(o, &f)| *o += f);
    }
    v[..2].iter_mut().for_each(|x| *x *= (1.0 - lambda) / n);
    v[2..].iter_mut().for_each(|x| *x *= lambda / n);
    Ok(PooledRep { vector: v, env_id: env.center, time_index: env.time_index })
}

/// Row-major squared Euclidean distances between two point sets.
pub fn cost_matrix<S: Scalar>(srcs: &[Vec<S>], tgts: &[Vec<S>]) -> Result<Vec<S>> {
    let width = srcs.first().or(tgts.first()).map_or(0, Vec::len);
    if let Some(bad) = srcs.iter().chain(tgts).find(|r| r.len() != width) {
        return Err(Error::Dimension(format!("representation of length {} among length-{width} ones", bad.len())));
    }
    let mut c = Vec::with_capacity(srcs.len() * tgts.len());
    for s in srcs {
        for t in tgts {
            c.push(s.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum());
        }
    }
    Ok(c)
}

/// `n` i.i.d. draws of `(row, col)` from the plan as a joint distribution.
pub fn sample_pairs_with<S: Scalar, R: Rng + ?Sized>(plan: &CouplingPlan<S>, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut cdf = Vec::with_capacity(plan.matrix.len());
    let mut acc = 0.0;
    for p in &plan.matrix {
        acc += p.as_f64().max(0.0);
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            (k / plan.cols, k % plan.cols)
        })
        .collect()
}

pub fn sample_pairs<S: Scalar>(plan: &CouplingPlan<S>, n: usize, seed: u64) -> Vec<(usize, usize)> {
    sample_pairs_with(plan, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Delimited `i,j,mass` lines for every non-negligible plan entry.
pub fn write_plan_triples<S: Scalar, W: Write>(plan: &CouplingPlan<S>, mut out: W) -> Result<()> {
    writeln!(out, "i,j,mass")?;
    for i in 0..plan.rows {
        for j in 0..plan.cols {
            let m = plan.get(i, j).as_f64();
            if m > 1e-15 {
                writeln!(out, "{i},{j},{m:e}")?;
            }
        }
    }
    Ok(())
}

/// Microenvironments of one slide, grouped into spatial regions.
#[derive(Debug, Clone)]
pub struct EnvPool<'a> {
    pub slide: &'a Slide,
    /// Position of the slide in the dataset's time order.
    pub position: usize,
    pub envs: &'a [Microenvironment],
    /// Env indices per region.
    pub regions: Vec<Vec<usize>>,
}

impl<'a> EnvPool<'a> {
    /// Partitions the environment centres with k-means into `k_regions` groups.
    pub fn new(slide: &'a Slide, position: usize, envs: &'a [Microenvironment], k_regions: usize, seed: u64) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::Degenerate(format!("slide {} has no environments", slide.time_index)));
        }
        let pts: Vec<[f64; 2]> = envs.iter().map(|e| slide.coords[e.center]).collect();
        let k = k_regions.clamp(1, pts.len());
        let km = kmeans_partition(&pts, k, seed)?;
        Ok(Self { slide, position, envs, regions: km.regions() })
    }

    /// One region covering every environment.
    pub fn single_region(slide: &'a Slide, position: usize, envs: &'a [Microenvironment]) -> Self {
        Self { slide, position, envs, regions: vec![(0..envs.len()).collect()] }
    }

    /// `m` env indices: a region uniformly at random, then an env uniformly
    /// within it. With `m ≥ len` every env is returned once, in order.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<usize> {
        if m >= self.envs.len() {
            return (0..self.envs.len()).collect();
        }
        let live: Vec<&Vec<usize>> = self.regions.iter().filter(|r| !r.is_empty()).collect();
        if live.len() < self.regions.len() {
            log::warn!("slide {}: skipping {} empty regions", self.slide.time_index, self.regions.len() - live.len());
        }
        (0..m)
            .map(|_| {
                let r = live[rng.random_range(0..live.len())];
                r[rng.random_range(0..r.len())]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CouplingConfig {
    pub lambda: f64,
    /// `None` means 0.05 × mean cost.
    pub epsilon: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub k_regions: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self { lambda: 0.1, epsilon: None, m: 256, n: 64, k_regions: 64 }
    }
}

/// Pairs of `(source env, target env)` indices drawn from a mini-batch
/// entropic coupling between two adjacent slides.
pub fn batch_coupling<R: Rng + ?Sized>(
    source: &EnvPool,
    target: &EnvPool,
    cfg: &CouplingConfig,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if target.position != source.position + 1 {
        return Err(Error::Contract(format!(
            "coupling slide positions {} and {}: only adjacent time points can be paired",
            source.position, target.position
        )));
    }
    if cfg.m == 0 || cfg.n == 0 {
        return Err(Error::Parameter("M and n must be at least 1".into()));
    }
    let si = source.sample(cfg.m, rng);
    let ti = target.sample(cfg.m, rng);
    let pool = |p: &EnvPool, idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        idx.iter().map(|&i| pooled_representation(p.slide, &p.envs[i], cfg.lambda).map(|r| r.vector)).collect()
    };
    let cost = cost_matrix(&pool(source, &si)?, &pool(target, &ti)?)?;
    let scfg = SinkhornConfig { epsilon: cfg.epsilon, ..Default::default() };
    let plan = sinkhorn(&cost, si.len(), ti.len(), &scfg)?;
    Ok(sample_pairs_with(&plan, cfg.n, rng).into_iter().map(|(i, j)| (si[i], ti[j])).collect())
}
