use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Slide};
use crate::error::{Error, Result};

/// Scale each row of a `rows × cols` count matrix so it sums to `target`,
/// defaulting to the lower median of the row sums. Returns the target used.
pub fn total_count_normalize(x: &mut [f64], cols: usize, target: Option<f64>) -> Result<f64> {
    if cols == 0 || x.len() % cols != 0 || x.is_empty() {
        return Err(Error::Dimension(format!("{} values do not form rows of width {cols}", x.len())));
    }
    if let Some(pos) = x.iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!("count {} at row {} is not a nonnegative number", x[pos], pos / cols)));
    }
    let sums: Vec<f64> = x.chunks(cols).map(|r| r.iter().sum()).collect();
    if let Some(row) = sums.iter().position(|&s| s <= 0.0) {
        return Err(Error::Degenerate(format!("cell {row} has zero total count")));
    }
    let target = match target {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(Error::Parameter(format!("normalization target {t} must be positive"))),
        None => {
            let mut sorted = sums.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[(sorted.len() - 1) / 2]
        }
    };
    for (row, s) in x.chunks_mut(cols).zip(&sums) {
        let f = target / s;
        row.iter_mut().for_each(|v| *v *= f);
    }
    Ok(target)
}

pub fn log1p_transform(x: &mut [f64]) -> Result<()> {
    if let Some(pos) = x.iter().position(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Domain(format!("log1p of negative entry {} at {pos}", x[pos])));
    }
    x.iter_mut().for_each(|v| *v = v.ln_1p());
    Ok(())
}

/// Principal components of a row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `rows × n` scores.
    pub embedding: Vec<f64>,
    /// `cols × n`, orthonormal columns.
    pub basis: Vec<f64>,
    pub mean: Vec<f64>,
    /// Variance along every available component (not only the first `n`), descending.
    pub explained_variance: Vec<f64>,
    pub n_components: usize,
}

impl Pca {
    pub fn component(&self, c: usize) -> Vec<f64> {
        let cols = self.mean.len();
        (0..cols).map(|g| self.basis[g * self.n_components + c]).collect()
    }
}

/// PCA by thin SVD of the centred data. Each component is signed so that its
/// largest-magnitude loading is positive (first such loading on ties).
pub fn pca(x: &[f64], rows: usize, cols: usize, n: usize) -> Result<Pca> {
    if rows * cols != x.len() || rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("{} values for a {rows}x{cols} matrix", x.len())));
    }
    if n == 0 || n > rows.min(cols) {
        return Err(Error::Dimension(format!("{n} components requested from a {rows}x{cols} matrix")));
    }
    let mut mean = vec![0.0; cols];
    for row in x.chunks(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let centred = DMatrix::from_fn(rows, cols, |r, c| x[r * cols + c] - mean[c]);
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD did not produce right singular vectors".into()))?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let denom = (rows.max(2) - 1) as f64;
    let explained_variance: Vec<f64> = order.iter().map(|&i| sv[i] * sv[i] / denom).collect();

    let mut basis = vec![0.0; cols * n];
    for (c, &i) in order.iter().take(n).enumerate() {
        let comp: Vec<f64> = (0..cols).map(|g| v_t[(i, g)]).collect();
        let mut lead = 0;
        for g in 1..cols {
            if comp[g].abs() > comp[lead].abs() {
                lead = g;
            }
        }
        let sign = if comp[lead] < 0.0 { -1.0 } else { 1.0 };
        for g in 0..cols {
            basis[g * n + c] = sign * comp[g];
        }
    }
    let b = DMatrix::from_row_slice(cols, n, &basis);
    let emb = centred * b;
    let embedding = (0..rows).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| emb[(r, c)]).collect();
    Ok(Pca { embedding, basis, mean, explained_variance, n_components: n })
}

fn pooled_moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for r in &rows {
        for d in 0..dim {
            var[d] += (r[d] - mean[d]).powi(2);
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    (mean, std, n)
}

/// Zero-mean, unit-variance features over all cells of all slides.
pub fn standardize_features(slides: &mut [Slide]) -> Result<()> {
    let dim = slides.first().map_or(0, |s| s.dim);
    let (mean, std, n) = pooled_moments(slides.iter().flat_map(|s| s.features.chunks(dim.max(1))), dim);
    if n < 2 {
        return Err(Error::Degenerate("standardizing features needs at least 2 cells".into()));
    }
    if let Some(d) = (0..dim).find(|&d| std[d] <= 1e-12 * (1.0 + mean[d].abs())) {
        return Err(Error::Degenerate(format!("feature dimension {d} has zero variance")));
    }
    for s in slides {
        for row in s.features.chunks_mut(dim) {
            for d in 0..dim {
                row[d] = (row[d] - mean[d]) / std[d];
            }
        }
    }
    Ok(())
}

/// Zero-mean, unit-variance coordinates per slide and per axis.
pub fn standardize_coords(slides: &mut [Slide]) -> Result<()> {
    for s in slides {
        let (mean, std, n) = pooled_moments(s.coords.iter().map(|c| c.as_slice()), 2);
        if n < 2 {
            return Err(Error::Degenerate(format!("slide {} needs at least 2 cells", s.time_index)));
        }
        for axis in 0..2 {
            if std[axis] <= 1e-12 * (1.0 + mean[axis].abs()) {
                let name = ["x", "y"][axis];
                return Err(Error::Degenerate(format!("slide {}: all cells share the same {name}", s.time_index)));
            }
        }
        for c in &mut s.coords {
            for axis in 0..2 {
                c[axis] = (c[axis] - mean[axis]) / std[axis];
            }
        }
    }
    Ok(())
}

/// Keep `round(factor·n)` cells per slide (at least one), chosen uniformly
/// without replacement and kept in original order.
pub fn subsample(slides: &[Slide], factor: f64, seed: u64) -> Result<Vec<Slide>> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Parameter(format!("subsample factor {factor} outside (0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(slides
        .iter()
        .map(|s| {
            let keep = ((s.len() as f64 * factor).round() as usize).clamp(1, s.len());
            let mut idx = sample(&mut rng, s.len(), keep).into_vec();
            idx.sort_unstable();
            s.select(&idx)
        })
        .collect())
}

/// Stage selection for [`preprocess`]. Stages run in the fixed order
/// subsample, normalize, log1p, PCA, standardize features, standardize coords.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessOptions {
    pub subsample: Option<f64>,
    pub normalize: bool,
    pub log1p: bool,
    /// Written as `0` in config files when PCA is skipped.
    #[serde(with = "zero_is_none")]
    pub pca_components: Option<usize>,
    pub standardize_features: bool,
    pub standardize_coords: bool,
    pub seed: u64,
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<usize>, D::Error> {
        Ok(Some(usize::deserialize(d)?).filter(|&n| n > 0))
    }
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            subsample: None,
            normalize: true,
            log1p: true,
            pca_components: Some(50),
            standardize_features: true,
            standardize_coords: true,
            seed: 0,
        }
    }
}

fn pooled(slides: &[Slide]) -> Vec<f64> {
    slides.iter().flat_map(|s| s.features.iter().copied()).collect()
}

fn unpool(slides: &mut [Slide], values: Vec<f64>, dim: usize) {
    let mut off = 0;
    for s in slides {
        let n = s.len() * dim;
        s.features = values[off..off + n].to_vec();
        s.dim = dim;
        off += n;
    }
}

pub fn preprocess(ds: &Dataset, opts: &PreprocessOptions) -> Result<Dataset> {
    let st = ds.meta.stages;
    let again = |flag: bool, applied: bool, name: &str| {
        if flag && applied {
            Err(Error::Contract(format!("stage '{name}' was already applied to this dataset")))
        } else {
            Ok(())
        }
    };
    again(opts.subsample.is_some(), st.subsampled, "subsample")?;
    again(opts.normalize, st.normalized, "normalize")?;
    again(opts.log1p, st.log1p, "log1p")?;
    again(opts.pca_components.is_some(), st.pca, "pca")?;
    again(opts.standardize_features, st.standardized_features, "standardize-features")?;
    again(opts.standardize_coords, st.standardized_coords, "standardize-coords")?;
    // A later stage cannot precede an earlier one that is still pending.
    if (st.pca || st.standardized_features) && (opts.normalize || opts.log1p) {
        return Err(Error::Contract("normalize/log1p cannot run after PCA or feature standardization".into()));
    }
    if st.standardized_features && opts.pca_components.is_some() {
        return Err(Error::Contract("PCA cannot run after feature standardization".into()));
    }

    let mut out = ds.clone();
    let dim = ds.dim();
    if let Some(f) = opts.subsample {
        out.slides = subsample(&out.slides, f, opts.seed)?;
        out.meta.stages.subsampled = true;
    }
    if opts.normalize {
        let mut x = pooled(&out.slides);
        total_count_normalize(&mut x, dim, None)?;
        unpool(&mut out.slides, x, dim);
        out.meta.stages.normalized = true;
    }
    if opts.log1p {
        let mut x = pooled(&out.slides);
        log1p_transform(&mut x)?;
        unpool(&mut out.slides, x, dim);
        out.meta.stages.log1p = true;
    }
    if let Some(n) = opts.pca_components {
        let x = pooled(&out.slides);
        let rows = x.len() / dim;
        let p = pca(&x, rows, dim, n)?;
        unpool(&mut out.slides, p.embedding, n);
        out.meta.stages.pca = true;
        out.meta.pca_components = Some(n);
    }
    if opts.standardize_features {
        standardize_features(&mut out.slides)?;
        out.meta.stages.standardized_features = true;
    }
    if opts.standardize_coords {
        standardize_coords(&mut out.slides)?;
        out.meta.stages.standardized_coords = true;
    }
    out.meta.feature_dim = out.dim();
    out.meta.num_timepoints = out.slides.len();
    Ok(out)
}
