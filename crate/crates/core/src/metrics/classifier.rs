use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AdamW, AdamWConfig, Linear, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a held-out improvement before stopping.
    pub patience: usize,
    /// Smallest held-out loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub holdout_fraction: f64,
    pub min_cells_per_type: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            optimizer: AdamWConfig { lr: 1e-3, weight_decay: 1e-2, ..AdamWConfig::default() },
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            min_delta: 1e-4,
            holdout_fraction: 0.2,
            min_cells_per_type: 20,
            seed: 0,
        }
    }
}

/// Two ReLU hidden layers and a linear read-out to one logit per type.
#[derive(Debug, Clone)]
pub struct TypeClassifier<S: Scalar = f64> {
    pub store: ParamStore<S>,
    layers: [Linear; 3],
    dim: usize,
    num_types: usize,
}

/// Outcome of [`train_classifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierFit {
    /// Weighted F1 on the held-out split.
    pub heldout_f1: f64,
    pub heldout_loss: f64,
    pub epochs: usize,
    pub train_size: usize,
    pub heldout_size: usize,
}

impl<S: Scalar> TypeClassifier<S> {
    pub fn new(dim: usize, num_types: usize, hidden: usize, seed: u64) -> Result<Self> {
        if num_types < 2 {
            return Err(Error::Parameter(format!("a classifier needs at least 2 types, got {num_types}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = [
            Linear::new(&mut store, "clf.0", dim, hidden, &mut rng)?,
            Linear::new(&mut store, "clf.1", hidden, hidden, &mut rng)?,
            Linear::new(&mut store, "clf.out", hidden, num_types, &mut rng)?,
        ];
        Ok(Self { store, layers, dim, num_types })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    fn rows(&self, features: &[S]) -> Result<usize> {
        if features.len() % self.dim != 0 {
            return Err(Error::Dimension(format!("{} values are not rows of {}", features.len(), self.dim)));
        }
        Ok(features.len() / self.dim)
    }

    fn forward<'t>(&self, tape: &'t Tape<S>, features: &[S]) -> Result<(crate::tensor::Bound<'t, S>, crate::tensor::Var<'t, S>)> {
        let n = self.rows(features)?;
        let p = self.store.bind(tape);
        let x = tape.constant(vec![n, self.dim], features.to_vec())?;
        let h = self.layers[0].forward(&p, x)?.relu()?;
        let h = self.layers[1].forward(&p, h)?.relu()?;
        let out = self.layers[2].forward(&p, h)?;
        Ok((p, out))
    }

    /// Row-major `[n, num_types]` logits.
    pub fn logits(&self, features: &[S]) -> Result<Vec<S>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, features)?.1.value())
    }

    /// Arg-max type per row; ties go to the lower type.
    pub fn predict(&self, features: &[S]) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits
            .chunks(self.num_types)
            .map(|row| row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best }))
            .collect())
    }

    /// Mean cross-entropy.
    pub fn loss(&self, features: &[S], labels: &[usize]) -> Result<S> {
        let tape = Tape::new();
        Ok(self.forward(&tape, features)?.1.cross_entropy(labels)?.item())
    }
}

/// Support-weighted mean of per-type F1 scores. Types absent from `truth`
/// get zero weight; a type never predicted scores 0.
pub fn weighted_f1(truth: &[usize], predicted: &[usize], num_types: usize) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::Dimension(format!("{} true labels, {} predictions", truth.len(), predicted.len())));
    }
    if truth.is_empty() {
        return Err(Error::Degenerate("no labels to score".into()));
    }
    let mut tp = vec![0usize; num_types];
    let mut pred_n = vec![0usize; num_types];
    let mut true_n = vec![0usize; num_types];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_types || p >= num_types {
            return Err(Error::Parameter(format!("label {} outside {num_types} types", t.max(p))));
        }
        true_n[t] += 1;
        pred_n[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let score: f64 = (0..num_types)
        .filter(|&c| true_n[c] > 0)
        .map(|c| {
            let f1 = 2.0 * tp[c] as f64 / (true_n[c] + pred_n[c]) as f64;
            f1 * true_n[c] as f64
        })
        .sum();
    Ok(score / truth.len() as f64)
}

fn gather<S: Scalar>(features: &[S], dim: usize, idx: &[usize]) -> Vec<S> {
    idx.iter().flat_map(|&i| features[i * dim..(i + 1) * dim].iter().copied()).collect()
}

/// Trains a [`TypeClassifier`] on a seeded 80/20 split with AdamW on the
/// cross-entropy, stopping once the held-out loss has not improved for
/// `patience` epochs. The parameters with the best held-out loss are kept.
pub fn train_classifier<S: Scalar>(
    features: &[S],
    dim: usize,
    labels: &[usize],
    num_types: usize,
    cfg: &ClassifierConfig,
) -> Result<(TypeClassifier<S>, ClassifierFit)> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(Error::Dimension(format!("{} feature values for {} labels of dimension {dim}", features.len(), labels.len())));
    }
    if num_types < 2 {
        return Err(Error::Contract(format!("type classification needs at least 2 types, got {num_types}")));
    }
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) || cfg.batch_size == 0 {
        return Err(Error::Parameter("holdout fraction must lie in (0, 1) and batch size be positive".into()));
    }
    let mut counts = vec![0usize; num_types];
    for &l in labels {
        *counts.get_mut(l).ok_or_else(|| Error::Parameter(format!("label {l} outside {num_types} types")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < cfg.min_cells_per_type) {
        return Err(Error::Contract(format!(
            "type {c} has {} cells, at least {} are needed",
            counts[c], cfg.min_cells_per_type
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((labels.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, labels.len() - 1);
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();
    let mut seen = vec![false; num_types];
    train.iter().for_each(|&i| seen[labels[i]] = true);
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(Error::Contract(format!("type {c} is absent from the training split")));
    }
    let hold_x = gather(features, dim, hold);
    let hold_y: Vec<usize> = hold.iter().map(|&i| labels[i]).collect();

    let mut model = TypeClassifier::<S>::new(dim, num_types, cfg.hidden, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.store);
    let mut best = (model.store.clone(), model.loss(&hold_x, &hold_y)?.as_f64());
    let mut stale = 0;
    let mut epochs = 0;
    while epochs < cfg.max_epochs && stale < cfg.patience {
        epochs += 1;
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            let x = gather(features, dim, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let (bound, logits) = model.forward(&tape, &x)?;
            let loss = logits.cross_entropy(&y)?;
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads, &bound)?;
            opt.step(&mut model.store)?;
        }
        let held = model.loss(&hold_x, &hold_y)?.as_f64();
        if held < best.1 - cfg.min_delta {
            best = (model.store.clone(), held);
            stale = 0;
        } else {
            stale += 1;
        }
    }
    model.store = best.0;
    let heldout_f1 = weighted_f1(&hold_y, &model.predict(&hold_x)?, num_types)?;
    let fit = ClassifierFit { heldout_f1, heldout_loss: best.1, epochs, train_size: train.len(), heldout_size: hold.len() };
    Ok((model, fit))
}
