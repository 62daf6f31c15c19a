//! Evaluation of generated slides against the observed next slide.
//!
//! The point-set kernels ([`psd`], [`spd`], [`kde_likelihood`], the classifier
//! and [`wasserstein`]) are generic over [`Scalar`]. [`evaluate`] ties them to a
//! trained model and a dataset.

mod classifier;
mod report;
mod wasserstein;

pub use classifier::{train_classifier, weighted_f1, ClassifierConfig, ClassifierFit, TypeClassifier};
pub use report::{evaluate, grid_env_state, EvalConfig, Evaluator, MetricsReport, ReportMetadata, TypeDistances, WEIGHTING_NOTE};
pub use wasserstein::{wasserstein, TransportSolver, WassersteinConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spatial::KdTree;

/// Mean over `from` points, pooled across time points, of the squared
/// distance to the nearest `to` point at the same time point.
fn directed<S: Scalar>(from: &[Vec<[S; 2]>], to: &[Vec<[S; 2]>], from_name: &str, to_name: &str) -> Result<S> {
    if from.len() != to.len() {
        return Err(Error::Dimension(format!(
            "{} {from_name} time points against {} {to_name} time points",
            from.len(),
            to.len()
        )));
    }
    let mut total = S::zero();
    let mut count = 0usize;
    for (t, (f, g)) in from.iter().zip(to).enumerate() {
        if f.is_empty() {
            continue;
        }
        if g.is_empty() {
            return Err(Error::Degenerate(format!("{to_name} set at time point {t} is empty")));
        }
        let tree = KdTree::new(g);
        for &p in f {
            total = total + tree.nearest(p).expect("nonempty tree").1;
        }
        count += f.len();
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("no {from_name} points")));
    }
    Ok(total / S::from_usize(count).unwrap())
}

/// Point-to-shape distance: how far generated cells land from the observed slide.
pub fn psd<S: Scalar>(generated: &[Vec<[S; 2]>], reference: &[Vec<[S; 2]>]) -> Result<S> {
    directed(generated, reference, "generated", "reference")
}

/// Shape-to-point distance: how much of the observed slide the generated cells miss.
pub fn spd<S: Scalar>(generated: &[Vec<[S; 2]>], reference: &[Vec<[S; 2]>]) -> Result<S> {
    directed(reference, generated, "reference", "generated")
}

/// Gaussian kernel density of `query` under `samples`, unnormalised so that a
/// sample at the query contributes 1.
pub fn kde_likelihood<S: Scalar>(samples: &[[S; 2]], query: [S; 2], sigma: S) -> Result<S> {
    if samples.is_empty() {
        return Err(Error::Degenerate("kde needs at least one sample".into()));
    }
    if !(sigma > S::zero()) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("kde bandwidth {sigma} must be positive")));
    }
    let denom = S::lit(2.0) * sigma * sigma;
    let sum: S = samples.iter().map(|&c| (-crate::spatial::dist2(c, query) / denom).exp()).sum();
    Ok(sum / S::from_usize(samples.len()).unwrap())
}

/// Type of the spatially nearest reference cell for every query point.
pub fn nearest_types<S: Scalar>(queries: &[[S; 2]], ref_coords: &[[S; 2]], ref_types: &[usize]) -> Result<Vec<usize>> {
    if ref_coords.len() != ref_types.len() {
        return Err(Error::Dimension(format!("{} labels for {} reference cells", ref_types.len(), ref_coords.len())));
    }
    if ref_coords.is_empty() {
        return Err(Error::Degenerate("empty reference set".into()));
    }
    let tree = KdTree::new(ref_coords);
    Ok(queries.iter().map(|&q| ref_types[tree.nearest(q).expect("nonempty tree").0]).collect())
}

/// Weighted F1 between the classifier's call on each generated cell and the
/// true type of its spatially nearest reference cell.
pub fn one_nn_f1<S: Scalar>(
    gen_coords: &[[S; 2]],
    gen_features: &[S],
    ref_coords: &[[S; 2]],
    ref_types: Option<&[usize]>,
    classifier: &TypeClassifier<S>,
) -> Result<f64> {
    let ref_types = ref_types.ok_or_else(|| Error::Contract("reference cells carry no type labels".into()))?;
    if gen_coords.is_empty() {
        return Err(Error::Degenerate("no generated cells".into()));
    }
    let predicted = classifier.predict(gen_features)?;
    if predicted.len() != gen_coords.len() {
        return Err(Error::Dimension(format!("{} feature rows for {} generated cells", predicted.len(), gen_coords.len())));
    }
    let matched = nearest_types(gen_coords, ref_coords, ref_types)?;
    weighted_f1(&matched, &predicted, classifier.num_types())
}
