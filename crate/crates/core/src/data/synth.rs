use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Slide};
use crate::error::{Error, Result};

/// Parameters of the drifting-blob generator.
///
/// Type `c` occupies an isotropic Gaussian blob whose centre moves by `drift`
/// per time step. Its population is `cells_per_slide / num_types` at the first
/// time point and is multiplied by `1 + growth` (even `c`) or `1 - growth`
/// (odd `c`) at every later one. Features of type `c` are Gaussian with unit
/// variance around `feature_separation · e_c`, shifted by `feature_drift · s`
/// along `e_{c+1}` at time `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_types: usize,
    pub num_timepoints: usize,
    pub cells_per_slide: usize,
    pub feature_dim: usize,
    pub drift: [f64; 2],
    pub growth: f64,
    pub blob_sigma: f64,
    pub blob_separation: f64,
    pub feature_separation: f64,
    pub feature_drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_types: 2,
            num_timepoints: 2,
            cells_per_slide: 1500,
            feature_dim: 8,
            drift: [1.0, 0.3],
            growth: 0.0,
            blob_sigma: 1.0,
            blob_separation: 6.0,
            feature_separation: 4.0,
            feature_drift: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_timepoints < 2 {
            return Err(Error::Parameter("synthetic data needs at least 2 time points".into()));
        }
        if self.num_types == 0 || self.feature_dim == 0 || self.cells_per_slide < self.num_types {
            return Err(Error::Parameter("need ≥1 type, ≥1 feature and ≥1 cell per type".into()));
        }
        if !(self.blob_sigma > 0.0) || !(self.growth > -1.0 && self.growth < 1.0) {
            return Err(Error::Parameter("blob_sigma must be positive and |growth| < 1".into()));
        }
        Ok(())
    }

    /// Blob centre of type `c` at the first time point.
    pub fn type_center(&self, c: usize) -> [f64; 2] {
        let k = self.num_types as f64;
        if self.num_types == 1 {
            return [0.0, 0.0];
        }
        let radius = self.blob_separation / (2.0 * (std::f64::consts::PI / k).sin());
        let angle = std::f64::consts::TAU * c as f64 / k;
        [radius * angle.cos(), radius * angle.sin()]
    }

    pub fn type_count(&self, c: usize, s: usize) -> usize {
        let base = self.cells_per_slide as f64 / self.num_types as f64;
        let g = if c % 2 == 0 { 1.0 + self.growth } else { 1.0 - self.growth };
        ((base * g.powi(s as i32)).round() as usize).max(1)
    }
}

/// Deterministic synthetic dataset; cells within a slide are shuffled.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.feature_dim;
    let mut slides = Vec::with_capacity(cfg.num_timepoints);
    for s in 0..cfg.num_timepoints {
        let mut cells: Vec<([f64; 2], Vec<f64>, usize)> = Vec::new();
        for c in 0..cfg.num_types {
            let base = cfg.type_center(c);
            let center = [base[0] + cfg.drift[0] * s as f64, base[1] + cfg.drift[1] * s as f64];
            let mut mean = vec![0.0; d];
            mean[c % d] += cfg.feature_separation;
            mean[(c + 1) % d] += cfg.feature_drift * s as f64;
            for _ in 0..cfg.type_count(c, s) {
                let gx: f64 = StandardNormal.sample(&mut rng);
                let gy: f64 = StandardNormal.sample(&mut rng);
                let xy = [center[0] + cfg.blob_sigma * gx, center[1] + cfg.blob_sigma * gy];
                let f: Vec<f64> = mean
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + z
                    })
                    .collect();
                cells.push((xy, f, c));
            }
        }
        cells.shuffle(&mut rng);
        let coords = cells.iter().map(|c| c.0).collect();
        let features = cells.iter().flat_map(|c| c.1.iter().copied()).collect();
        let types = cells.iter().map(|c| c.2).collect();
        slides.push(Slide::new(s, coords, features, d)?.with_types(types)?);
    }
    let meta = DatasetMeta {
        feature_dim: d,
        num_timepoints: cfg.num_timepoints,
        num_types: Some(cfg.num_types),
        seed: Some(seed),
        ..Default::default()
    };
    Dataset::new(slides, meta)
}
