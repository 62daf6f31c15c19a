use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spatial::dist2;

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Vec<[f64; 2]>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_trace: Vec<f64>,
}

impl KMeans {
    /// Indices of the cells in each region, ascending.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

const MAX_ITER: usize = 100;
const SHIFT_TOL: f64 = 1e-6;

fn plus_plus_seeds(pts: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = pts.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![pts[first]];
    let mut d2: Vec<f64> = pts.iter().map(|&p| dist2(p, pts[first])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
            }
            pick
        } else {
            // Remaining points coincide with existing centres.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.push(pts[pick]);
        for (i, &p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, pts[pick]));
        }
    }
    centers
}

fn assign(pts: &[[f64; 2]], centers: &[[f64; 2]], labels: &mut [usize], d2: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, &p) in pts.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, &q) in centers.iter().enumerate() {
            let d = dist2(p, q);
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        d2[i] = best.1;
        inertia += best.1;
    }
    inertia
}

/// Move the farthest point of a multi-member cluster into each empty one.
fn reseed_empty(
    pts: &[[f64; 2]],
    labels: &mut [usize],
    d2: &mut [f64],
    sums: &mut [[f64; 2]],
    counts: &mut [usize],
) {
    for c in 0..counts.len() {
        if counts[c] != 0 {
            continue;
        }
        let far = (0..pts.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)));
        if let Some(far) = far {
            let old = labels[far];
            counts[old] -= 1;
            sums[old][0] -= pts[far][0];
            sums[old][1] -= pts[far][1];
            labels[far] = c;
            d2[far] = 0.0;
            counts[c] = 1;
            sums[c] = pts[far];
        }
    }
}

/// Partition 2D points into `k` regions with k-means++ seeding and Lloyd
/// iterations (stop when no centre moves more than 1e-6, or after 100 rounds).
/// Empty regions are reseeded at the point farthest from its own centre.
pub fn kmeans_partition(pts: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeans> {
    let n = pts.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("cannot form {k} regions from {n} cells")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeds(pts, k, &mut rng);
    let mut labels = vec![0; n];
    let mut d2 = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        trace.push(assign(pts, &centers, &mut labels, &mut d2));
        iterations += 1;
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums[l][0] += pts[i][0];
            sums[l][1] += pts[i][1];
            counts[l] += 1;
        }
        reseed_empty(pts, &mut labels, &mut d2, &mut sums, &mut counts);
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] > 0 {
                let m = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
                shift = shift.max(dist2(m, centers[c]).sqrt());
                centers[c] = m;
            }
        }
        if shift < SHIFT_TOL || iterations >= MAX_ITER {
            break;
        }
    }
    // Final labels consistent with the final centres.
    trace.push(assign(pts, &centers, &mut labels, &mut d2));
    let mut sums = vec![[0.0; 2]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        sums[l][0] += pts[i][0];
        sums[l][1] += pts[i][1];
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        reseed_empty(pts, &mut labels, &mut d2, &mut sums, &mut counts);
        for c in empty {
            if let Some(i) = labels.iter().position(|&l| l == c) {
                centers[c] = pts[i];
            }
        }
        *trace.last_mut().unwrap() = d2.iter().sum();
    }
    Ok(KMeans { labels, centers, iterations, inertia_trace: trace })
}
