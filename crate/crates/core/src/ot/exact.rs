//! Exact optimal transport between uniform discrete measures.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Minimal `⟨P, C⟩` over couplings of the uniform measures on `n0` rows and
/// `n1` columns.
///
/// Solved as an integer transportation problem (row supply `n1/g`, column
/// demand `n0/g` with `g = gcd(n0, n1)`) by successive shortest paths with
/// dense Dijkstra on reduced costs, `O((n0 + n1)²)` per augmentation.
pub fn exact_transport_uniform<S: Scalar>(cost: &[S], n0: usize, n1: usize) -> Result<S> {
    if n0 == 0 || n1 == 0 || cost.len() != n0 * n1 {
        return Err(Error::Dimension(format!("cost of {} entries for a {n0}x{n1} problem", cost.len())));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {i} is {}", cost[i])));
    }
    let g = gcd(n0, n1);
    let mut supply = vec![(n1 / g) as u64; n0];
    let mut demand = vec![(n0 / g) as u64; n1];
    let mut flow = vec![0u64; n0 * n1];
    let c = |i: usize, j: usize| cost[i * n1 + j];
    // reduced cost of i -> j is c(i, j) + u[i] - v[j] >= 0
    let mut u = vec![S::zero(); n0];
    let mut v: Vec<S> = (0..n1).map(|j| (0..n0).map(|i| c(i, j)).fold(S::infinity(), S::min)).collect();
    let mut remaining: u64 = supply.iter().sum();
    let n = n0 + n1;
    let mut dist = vec![S::infinity(); n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    while remaining > 0 {
        dist.iter_mut().for_each(|d| *d = S::infinity());
        pred.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        // rows with supply left hang off a virtual source whose potential
        // stays 0; u never exceeds 0, so these entry costs are >= 0
        for i in 0..n0 {
            if supply[i] > 0 {
                dist[i] = (-u[i]).max(S::zero());
            }
        }
        let sink = loop {
            let mut best = usize::MAX;
            for x in 0..n {
                if !done[x] && dist[x].is_finite() && (best == usize::MAX || dist[x] < dist[best]) {
                    best = x;
                }
            }
            if best == usize::MAX {
                return Err(Error::Contract("transport network disconnected".into()));
            }
            done[best] = true;
            let d = dist[best];
            if best < n0 {
                let i = best;
                for j in 0..n1 {
                    let y = n0 + j;
                    if !done[y] {
                        let nd = d + (c(i, j) + u[i] - v[j]).max(S::zero());
                        if nd < dist[y] {
                            dist[y] = nd;
                            pred[y] = i;
                        }
                    }
                }
            } else {
                let j = best - n0;
                if demand[j] > 0 {
                    break j;
                }
                for i in 0..n0 {
                    if !done[i] && flow[i * n1 + j] > 0 {
                        let nd = d + (v[j] - c(i, j) - u[i]).max(S::zero());
                        if nd < dist[i] {
                            dist[i] = nd;
                            pred[i] = best;
                        }
                    }
                }
            }
        };
        let reach = dist[n0 + sink];
        for i in 0..n0 {
            u[i] = u[i] + dist[i].min(reach);
        }
        for j in 0..n1 {
            v[j] = v[j] + dist[n0 + j].min(reach);
        }
        // walk back to the source row, collecting the bottleneck
        let mut amount = demand[sink];
        let mut y = n0 + sink;
        loop {
            let i = pred[y];
            if pred[i] == usize::MAX {
                amount = amount.min(supply[i]);
                break;
            }
            let j = pred[i] - n0;
            amount = amount.min(flow[i * n1 + j]);
            y = pred[i];
        }
        let mut y = n0 + sink;
        loop {
            let i = pred[y];
            flow[i * n1 + (y - n0)] += amount;
            if pred[i] == usize::MAX {
                supply[i] -= amount;
                break;
            }
            let j = pred[i] - n0;
            flow[i * n1 + j] -= amount;
            y = pred[i];
        }
        demand[sink] -= amount;
        remaining -= amount;
    }
    let total = S::from_usize(n0 * n1 / g).unwrap();
    let value: S = flow.iter().zip(cost).filter(|(&f, _)| f > 0).map(|(&f, &c)| S::from_u64(f).unwrap() * c).sum();
    Ok(value / total)
}
