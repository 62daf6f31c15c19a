//! Time-resolved slides, preprocessing, microenvironments and the synthetic generator.

mod env;
mod grid;
mod io;
mod kmeans;
mod preprocess;
mod synth;

pub use env::{envs_at, extract_microenvironments, fix_env_size, modal_env_size, standardize_env_size, Microenvironment};
pub use grid::{discretized_grid_envs, GridEnvs};
pub use io::{
    format_cell_table, load_dataset, load_slides, meta_path, parse_cell_table, save_dataset, write_cell_table, DatasetMeta,
    Stages,
};
pub use kmeans::{kmeans_partition, KMeans};
pub use preprocess::{
    log1p_transform, pca, preprocess, standardize_coords, standardize_features, subsample, total_count_normalize, Pca,
    PreprocessOptions,
};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};

/// One cell, materialised from a [`Slide`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub coords: [f64; 2],
    pub features: Vec<f64>,
    pub type_label: Option<usize>,
    pub time_index: usize,
}

/// All cells observed at one time point, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub time_index: usize,
    pub coords: Vec<[f64; 2]>,
    /// Row-major `len × dim` feature matrix.
    pub features: Vec<f64>,
    pub dim: usize,
    pub types: Option<Vec<usize>>,
    /// Present on generated tables only.
    pub sample_ids: Option<Vec<u64>>,
}

impl Slide {
    pub fn new(time_index: usize, coords: Vec<[f64; 2]>, features: Vec<f64>, dim: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Degenerate(format!("slide {time_index} has no cells")));
        }
        if features.len() != coords.len() * dim {
            return Err(Error::Dimension(format!(
                "slide {time_index}: {} feature values for {} cells of dimension {dim}",
                features.len(),
                coords.len()
            )));
        }
        let finite = coords.iter().flatten().chain(&features).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("slide {time_index} contains non-finite values")));
        }
        Ok(Self { time_index, coords, features, dim, types: None, sample_ids: None })
    }

    pub fn with_types(mut self, types: Vec<usize>) -> Result<Self> {
        if types.len() != self.coords.len() {
            return Err(Error::Dimension(format!("{} labels for {} cells", types.len(), self.coords.len())));
        }
        self.types = Some(types);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell(&self, i: usize) -> Cell {
        Cell {
            coords: self.coords[i],
            features: self.feature(i).to_vec(),
            type_label: self.types.as_ref().map(|t| t[i]),
            time_index: self.time_index,
        }
    }

    /// Sub-slide with the given cells, in the given order.
    pub fn select(&self, idx: &[usize]) -> Slide {
        Slide {
            time_index: self.time_index,
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            features: idx.iter().flat_map(|&i| self.feature(i).iter().copied()).collect(),
            dim: self.dim,
            types: self.types.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            sample_ids: self.sample_ids.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }
}

/// Slides in ascending time order plus the sidecar metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub slides: Vec<Slide>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(slides: Vec<Slide>, meta: DatasetMeta) -> Result<Self> {
        let ds = Self { slides, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.slides.first().map_or(0, |s| s.dim)
    }

    pub fn num_timepoints(&self) -> usize {
        self.slides.len()
    }

    /// Number of distinct type labels, derived from the data when the
    /// metadata does not declare it.
    pub fn num_types(&self) -> Option<usize> {
        self.meta.num_types.or_else(|| {
            self.slides.iter().filter_map(|s| s.types.as_ref()).flatten().max().map(|&m| m + 1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.slides.is_empty() {
            return Err(Error::Format("no cells".into()));
        }
        let d = self.dim();
        for w in self.slides.windows(2) {
            if w[0].time_index >= w[1].time_index {
                return Err(Error::Format("slides must be in strictly ascending time order".into()));
            }
        }
        for s in &self.slides {
            if s.dim != d {
                return Err(Error::Dimension(format!("slide {} has dimension {}, expected {d}", s.time_index, s.dim)));
            }
            if let (Some(types), Some(n)) = (&s.types, self.meta.num_types) {
                if let Some(&bad) = types.iter().find(|&&t| t >= n) {
                    return Err(Error::Format(format!("type label {bad} >= declared {n} types")));
                }
            }
        }
        Ok(())
    }
}
