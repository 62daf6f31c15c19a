use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::env::{envs_at, Microenvironment};
use super::Slide;
use crate::error::{Error, Result};
use crate::spatial::KdTree;

/// Evaluation environments centred on grid-selected cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEnvs {
    /// Centre cells, grid-selected ones ascending followed by random extras.
    pub centers: Vec<usize>,
    pub envs: Vec<Microenvironment>,
    /// Step actually used (the requested one, or half of it after densifying).
    pub grid_step: f64,
}

fn grid_centers(slide: &Slide, tree: &KdTree, step: f64) -> Vec<usize> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &slide.coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let nodes = |a: usize| ((hi[a] - lo[a]) / step + 1e-9).floor() as usize + 1;
    let mut picked = vec![false; slide.len()];
    for i in 0..nodes(0) {
        for j in 0..nodes(1) {
            let q = [lo[0] + i as f64 * step, lo[1] + j as f64 * step];
            if let Some((c, _)) = tree.nearest(q) {
                picked[c] = true;
            }
        }
    }
    (0..slide.len()).filter(|&i| picked[i]).collect()
}

/// Deterministic evaluation set for one slide: the nearest cell to every node
/// of a regular grid over the bounding box becomes a centre, random extra
/// centres top the set up to `target_count`, and each centre gets its radius-`r`
/// environment. If some cell is in no environment the grid step is halved
/// once; if coverage still fails the call errors.
pub fn discretized_grid_envs(
    slide: &Slide,
    grid_step: f64,
    r: f64,
    target_count: usize,
    seed: u64,
) -> Result<GridEnvs> {
    if !(grid_step > 0.0) {
        return Err(Error::Parameter(format!("grid step {grid_step} must be positive")));
    }
    let tree = KdTree::new(&slide.coords);
    let mut step = grid_step;
    for attempt in 0..2 {
        let mut centers = grid_centers(slide, &tree, step);
        if centers.len() < target_count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut taken = vec![false; slide.len()];
            centers.iter().for_each(|&c| taken[c] = true);
            let free: Vec<usize> = (0..slide.len()).filter(|&i| !taken[i]).collect();
            let extra = (target_count - centers.len()).min(free.len());
            centers.extend(sample(&mut rng, free.len(), extra).into_iter().map(|j| free[j]));
        }
        let envs = envs_at(slide, &tree, &centers, r)?;
        let mut covered = vec![false; slide.len()];
        envs.iter().flat_map(|e| e.members.iter()).for_each(|&m| covered[m] = true);
        if covered.iter().all(|&c| c) {
            return Ok(GridEnvs { centers, envs, grid_step: step });
        }
        if attempt == 0 {
            log::debug!("grid step {step} leaves cells uncovered on slide {}; halving", slide.time_index);
            step /= 2.0;
        }
    }
    let missing = {
        let envs = envs_at(slide, &tree, &grid_centers(slide, &tree, step), r)?;
        let mut covered = vec![false; slide.len()];
        envs.iter().flat_map(|e| e.members.iter()).for_each(|&m| covered[m] = true);
        covered.iter().filter(|&&c| !c).count()
    };
    Err(Error::Degenerate(format!(
        "grid step {grid_step} (densified to {step}) with radius {r} leaves {missing} cells of slide {} uncovered",
        slide.time_index
    )))
}
