use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use super::Slide;
use crate::error::{Error, Result};
use crate::spatial::KdTree;

/// Cells of one slide around a centre cell. Padded slots point at the
/// centre and carry `mask == false`; they materialise as zero vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Microenvironment {
    pub center: usize,
    pub time_index: usize,
    pub members: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Microenvironment {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_members(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&i, _)| i)
    }
}

/// Closed-ball environment around each listed centre, members ascending.
pub fn envs_at(slide: &Slide, tree: &KdTree, centers: &[usize], r: f64) -> Result<Vec<Microenvironment>> {
    if !(r > 0.0) {
        return Err(Error::Parameter(format!("radius {r} must be positive")));
    }
    Ok(centers
        .iter()
        .map(|&c| {
            let members = tree.within(slide.coords[c], r);
            let mask = vec![true; members.len()];
            Microenvironment { center: c, time_index: slide.time_index, members, mask }
        })
        .collect())
}

/// One environment per cell: every cell within distance `r` (inclusive).
pub fn extract_microenvironments(slide: &Slide, r: f64) -> Result<Vec<Microenvironment>> {
    let tree = KdTree::new(&slide.coords);
    let centers: Vec<usize> = (0..slide.len()).collect();
    envs_at(slide, &tree, &centers, r)
}

/// Most frequent member count; ties go to the smaller count.
pub fn modal_env_size(envs: &[Microenvironment]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in envs {
        *counts.entry(e.valid_count()).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (&k, &c) in &counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k).ok_or_else(|| Error::Contract("no environments to size".into()))
}

/// Bring every environment to exactly `k` slots. Larger ones keep the centre
/// plus `k−1` members drawn uniformly without replacement; smaller ones are
/// padded with masked slots.
pub fn fix_env_size<R: Rng + ?Sized>(
    envs: &[Microenvironment],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Microenvironment>> {
    if k == 0 {
        return Err(Error::Parameter("environment size must be positive".into()));
    }
    Ok(envs
        .iter()
        .map(|e| {
            let valid: Vec<usize> = e.valid_members().collect();
            let mut members = if valid.len() > k {
                let others: Vec<usize> = valid.iter().copied().filter(|&i| i != e.center).collect();
                let mut keep: Vec<usize> =
                    sample(rng, others.len(), k - 1).into_iter().map(|j| others[j]).collect();
                keep.push(e.center);
                keep.sort_unstable();
                keep
            } else {
                valid
            };
            let n = members.len();
            members.resize(k, e.center);
            let mask = (0..k).map(|i| i < n).collect();
            Microenvironment { center: e.center, time_index: e.time_index, members, mask }
        })
        .collect())
}

/// [`fix_env_size`] at the modal size. Returns the chosen `k`.
pub fn standardize_env_size<R: Rng + ?Sized>(
    envs: &[Microenvironment],
    rng: &mut R,
) -> Result<(usize, Vec<Microenvironment>)> {
    let k = modal_env_size(envs)?;
    Ok((k, fix_env_size(envs, k, rng)?))
}
