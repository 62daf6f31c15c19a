use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{cost_matrix, exact_transport_uniform, mean_cost, sinkhorn, SinkhornConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportSolver {
    /// Exact transportation problem: the `ε → 0` limit of the divergence.
    Exact,
    /// Debiased Sinkhorn divergence at `relative_epsilon × mean cost`.
    Sinkhorn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WassersteinConfig {
    pub solver: TransportSolver,
    /// Regularisation as a fraction of the mean cross cost (Sinkhorn only).
    pub relative_epsilon: f64,
    pub max_iter: usize,
    /// L1 row-marginal tolerance of the Sinkhorn plans.
    pub tol: f64,
    /// Larger sets are subsampled uniformly to this many points.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for WassersteinConfig {
    fn default() -> Self {
        Self {
            solver: TransportSolver::Exact,
            relative_epsilon: 1e-3,
            max_iter: 5000,
            tol: 1e-4,
            max_points: 300,
            seed: 0,
        }
    }
}

fn subsample<S: Scalar>(pts: &[Vec<S>], max: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<S>> {
    if pts.len() <= max {
        return pts.to_vec();
    }
    let mut idx = sample(rng, pts.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pts[i].clone()).collect()
}

fn powered<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>], p: u32) -> Result<Vec<S>> {
    let c = cost_matrix(a, b)?;
    Ok(if p == 1 { c.into_iter().map(|x| x.sqrt()).collect() } else { c })
}

/// Transport cost `⟨P, C⟩` of the entropic plan.
fn entropic_cost<S: Scalar>(cost: &[S], n0: usize, n1: usize, eps: S, cfg: &WassersteinConfig) -> Result<S> {
    let scfg = SinkhornConfig { epsilon: Some(eps), max_iter: cfg.max_iter, tol: cfg.tol, ..SinkhornConfig::default() };
    Ok(sinkhorn(cost, n0, n1, &scfg)?.transport_cost(cost))
}

/// `W_p` between two uniform point clouds (rows of equal width), `p ∈ {1, 2}`.
///
/// With [`TransportSolver::Sinkhorn`] the value is the debiased divergence
/// `OT(a, b) − ½ OT(a, a) − ½ OT(b, b)`, all three plans at the same `ε`, so
/// identical sets give exactly zero; it is clamped at zero before the `p`-th
/// root. [`TransportSolver::Exact`] solves the unregularised problem.
pub fn wasserstein<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>], p: u32, cfg: &WassersteinConfig) -> Result<S> {
    if p != 1 && p != 2 {
        return Err(Error::Parameter(format!("Wasserstein order {p} is not 1 or 2")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Degenerate("Wasserstein distance between empty sets".into()));
    }
    if !(cfg.relative_epsilon > 0.0) || cfg.max_points == 0 {
        return Err(Error::Parameter("relative epsilon and max points must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = subsample(a, cfg.max_points, &mut rng);
    let b = subsample(b, cfg.max_points, &mut rng);
    let cab = powered(&a, &b, p)?;
    let value = match cfg.solver {
        TransportSolver::Exact => exact_transport_uniform(&cab, a.len(), b.len())?,
        TransportSolver::Sinkhorn => {
            let scale = mean_cost(&cab);
            if scale == S::zero() {
                return Ok(S::zero());
            }
            let eps = scale * S::lit(cfg.relative_epsilon);
            let ab = entropic_cost(&cab, a.len(), b.len(), eps, cfg)?;
            let aa = entropic_cost(&powered(&a, &a, p)?, a.len(), a.len(), eps, cfg)?;
            let bb = if a == b { aa } else { entropic_cost(&powered(&b, &b, p)?, b.len(), b.len(), eps, cfg)? };
            ab - S::lit(0.5) * (aa + bb)
        }
    };
    let value = value.max(S::zero());
    Ok(if p == 1 { value } else { value.sqrt() })
}
