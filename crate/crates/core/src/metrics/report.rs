use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nearest_types, psd, spd, train_classifier, wasserstein, weighted_f1};
use super::{ClassifierConfig, ClassifierFit, TypeClassifier, WassersteinConfig};
use crate::data::{discretized_grid_envs, extract_microenvironments, fix_env_size, modal_env_size, Dataset, Slide};
use crate::error::{Error, Result};
use crate::flow::{generate, EnvState, FlowModel, GenerationConfig};

/// How per-type distances are averaged; copied into every report.
pub const WEIGHTING_NOTE: &str = "uniform over (cell type, time point) pairs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Grid spacing; `None` uses the environment radius.
    pub grid_step: Option<f64>,
    /// Environment radius; `None` uses the model's training radius.
    pub radius: Option<f64>,
    /// Slots per source environment; `None` uses the model's `k`, or for
    /// per-cell models the modal radius-environment size of the source slide.
    pub env_size: Option<usize>,
    /// Extra random centres up to this many environments per slide.
    pub target_count: usize,
    pub generation: GenerationConfig,
    pub classifier: ClassifierConfig,
    pub compute_wasserstein: bool,
    pub wasserstein: WassersteinConfig,
    pub model_id: Option<String>,
    pub dataset_id: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_step: None,
            radius: None,
            env_size: None,
            target_count: 0,
            generation: GenerationConfig::default(),
            classifier: ClassifierConfig::default(),
            compute_wasserstein: true,
            wasserstein: WassersteinConfig::default(),
            model_id: None,
            dataset_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeDistances {
    pub w1_coords: f64,
    pub w2_coords: f64,
    pub w1_features: f64,
    pub w2_features: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub weighting: String,
    pub generated_cells: usize,
    pub reference_cells: usize,
    /// Held-out weighted F1 of the type classifier, when one was trained.
    pub classifier_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psd: f64,
    pub spd: f64,
    /// Absent when the dataset has no type labels.
    pub one_nn_f1: Option<f64>,
    pub metadata: ReportMetadata,
    /// Keyed `type_<label>`.
    pub wasserstein: BTreeMap<String, TypeDistances>,
}

const TABLE_COLUMNS: [&str; 10] = [
    "model_id",
    "dataset_id",
    "seed",
    "psd",
    "spd",
    "one_nn_f1",
    "w1_coords",
    "w2_coords",
    "w1_features",
    "w2_features",
];

impl MetricsReport {
    /// Key-value text; keys always appear in the same order.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    pub fn table_header(delim: char) -> String {
        TABLE_COLUMNS.join(&delim.to_string())
    }

    /// One delimited row; Wasserstein columns are means over types, empty
    /// when nothing was computed.
    pub fn table_row(&self, delim: char) -> String {
        let n = self.wasserstein.len();
        let mean = |f: fn(&TypeDistances) -> f64| {
            if n == 0 {
                String::new()
            } else {
                (self.wasserstein.values().map(f).sum::<f64>() / n as f64).to_string()
            }
        };
        let cols = [
            self.metadata.model_id.clone(),
            self.metadata.dataset_id.clone(),
            self.metadata.seed.to_string(),
            self.psd.to_string(),
            self.spd.to_string(),
            self.one_nn_f1.map(|f| f.to_string()).unwrap_or_default(),
            mean(|d| d.w1_coords),
            mean(|d| d.w2_coords),
            mean(|d| d.w1_features),
            mean(|d| d.w2_features),
        ];
        cols.join(&delim.to_string())
    }
}

/// Shared state for evaluating several models on one dataset: the type
/// classifier is trained once.
#[derive(Debug)]
pub struct Evaluator<'a> {
    ds: &'a Dataset,
    cfg: EvalConfig,
    seed: u64,
    classifier: Option<(TypeClassifier<f64>, ClassifierFit)>,
}

/// Grid environments of `slide` resized to `env_size` slots (the modal size
/// when `None`) and packed for generation.
pub fn grid_env_state(
    slide: &Slide,
    step: f64,
    radius: f64,
    target_count: usize,
    env_size: Option<usize>,
    seed: u64,
) -> Result<EnvState> {
    let grid = discretized_grid_envs(slide, step, radius, target_count, seed)?;
    let k = match env_size {
        Some(k) => k,
        None => modal_env_size(&grid.envs)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let envs = fix_env_size(&grid.envs, k, &mut rng)?;
    let items: Vec<_> = envs.iter().map(|e| (slide, e)).collect();
    EnvState::from_envs(&items)
}

fn derive(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

impl<'a> Evaluator<'a> {
    /// Trains the type classifier on every labelled cell when the dataset has labels.
    pub fn new(ds: &'a Dataset, cfg: EvalConfig, seed: u64) -> Result<Self> {
        if ds.num_timepoints() < 2 {
            return Err(Error::Contract("evaluation needs at least two time points".into()));
        }
        let classifier = match ds.num_types() {
            Some(types) if ds.slides.iter().all(|s| s.types.is_some()) => {
                let x: Vec<f64> = ds.slides.iter().flat_map(|s| s.features.iter().copied()).collect();
                let y: Vec<usize> = ds.slides.iter().flat_map(|s| s.types.clone().unwrap()).collect();
                let ccfg = ClassifierConfig { seed: derive(seed, cfg.classifier.seed), ..cfg.classifier.clone() };
                Some(train_classifier(&x, ds.dim(), &y, types, &ccfg)?)
            }
            _ => None,
        };
        Ok(Self { ds, cfg, seed, classifier })
    }

    pub fn classifier(&self) -> Option<&(TypeClassifier<f64>, ClassifierFit)> {
        self.classifier.as_ref()
    }

    /// Grid environments of slide `position` with exactly `env_size` slots,
    /// or the modal size when `None`.
    pub fn source_envs(&self, position: usize, radius: f64, env_size: Option<usize>) -> Result<EnvState> {
        let step = self.cfg.grid_step.unwrap_or(radius);
        let seed = derive(self.seed, position as u64);
        grid_env_state(&self.ds.slides[position], step, radius, self.cfg.target_count, env_size, seed)
    }

    pub fn evaluate(&self, model: &FlowModel) -> Result<MetricsReport> {
        let radius = self.cfg.radius.unwrap_or(model.spec.radius);
        let t = self.ds.num_timepoints();
        let id = self.cfg.model_id.clone().unwrap_or_else(|| format!("{}-{}", model.spec.objective, model.spec.variant));
        let mut sizes = Vec::with_capacity(t - 1);
        for s in 0..t - 1 {
            sizes.push(match (self.cfg.env_size, model.spec.variant) {
                (Some(k), _) => k,
                // the per-cell model sees environments of the size an
                // environment model would have been trained with
                (None, crate::flow::Variant::SpFlow) => {
                    modal_env_size(&extract_microenvironments(&self.ds.slides[s], radius)?)?
                }
                (None, _) => model.spec.k,
            });
        }
        self.run(radius, |s| Some(sizes[s]), id, |s, source| {
            let gcfg = GenerationConfig { seed: derive(self.seed ^ self.cfg.generation.seed, s as u64), ..self.cfg.generation.clone() };
            generate(model, source, &vec![s; source.batch], t, &gcfg)
        })
    }

    /// Evaluates an arbitrary generator. It receives the source slide
    /// position and its grid environments and returns the predicted cells of
    /// the next slide in any layout; only valid slots are scored.
    pub fn evaluate_with<F>(&self, radius: f64, env_size: Option<usize>, generator: F) -> Result<MetricsReport>
    where
        F: FnMut(usize, &EnvState) -> Result<EnvState>,
    {
        let id = self.cfg.model_id.clone().unwrap_or_else(|| "custom".into());
        self.run(radius, |_| env_size, id, generator)
    }

    fn run<F>(
        &self,
        radius: f64,
        env_size: impl Fn(usize) -> Option<usize>,
        model_id: String,
        mut generator: F,
    ) -> Result<MetricsReport>
    where
        F: FnMut(usize, &EnvState) -> Result<EnvState>,
    {
        let ds = self.ds;
        let pairs = ds.num_timepoints() - 1;
        let mut gen_coords = Vec::with_capacity(pairs);
        let mut gen_features = Vec::with_capacity(pairs);
        let mut ref_coords = Vec::with_capacity(pairs);
        for s in 0..pairs {
            let source = self.source_envs(s, radius, env_size(s))?;
            let out = generator(s, &source)?;
            if out.dim != ds.dim() {
                return Err(Error::Dimension(format!("generator returned {} features, dataset has {}", out.dim, ds.dim())));
            }
            let (c, f) = out.valid_cells();
            gen_coords.push(c);
            gen_features.push(f);
            ref_coords.push(ds.slides[s + 1].coords.clone());
        }
        let psd = psd(&gen_coords, &ref_coords)?;
        let spd = spd(&gen_coords, &ref_coords)?;

        let mut one_nn_f1 = None;
        let mut distances = BTreeMap::new();
        if let Some((clf, _)) = &self.classifier {
            let mut truth = Vec::new();
            let mut called = Vec::new();
            let mut per_type: BTreeMap<usize, Vec<TypeDistances>> = BTreeMap::new();
            for s in 0..pairs {
                if gen_coords[s].is_empty() {
                    continue;
                }
                let target = &ds.slides[s + 1];
                let ref_types = target.types.as_deref().ok_or_else(|| Error::Contract("reference cells carry no type labels".into()))?;
                let predicted = clf.predict(&gen_features[s])?;
                truth.extend(nearest_types(&gen_coords[s], &target.coords, ref_types)?);
                called.extend(predicted.iter().copied());
                if self.cfg.compute_wasserstein {
                    self.type_distances(s, &gen_coords[s], &gen_features[s], &predicted, &mut per_type)?;
                }
            }
            one_nn_f1 = Some(weighted_f1(&truth, &called, clf.num_types())?);
            for (c, list) in per_type {
                let n = list.len() as f64;
                let avg = |f: fn(&TypeDistances) -> f64| list.iter().map(f).sum::<f64>() / n;
                distances.insert(
                    format!("type_{c}"),
                    TypeDistances {
                        w1_coords: avg(|d| d.w1_coords),
                        w2_coords: avg(|d| d.w2_coords),
                        w1_features: avg(|d| d.w1_features),
                        w2_features: avg(|d| d.w2_features),
                    },
                );
            }
        }

        let metadata = ReportMetadata {
            model_id,
            dataset_id: self.cfg.dataset_id.clone().unwrap_or_else(|| match ds.meta.seed {
                Some(s) => format!("synthetic-{s}"),
                None => "dataset".into(),
            }),
            seed: self.seed,
            weighting: WEIGHTING_NOTE.into(),
            generated_cells: gen_coords.iter().map(Vec::len).sum(),
            reference_cells: ref_coords.iter().map(Vec::len).sum(),
            classifier_f1: self.classifier.as_ref().map(|(_, fit)| fit.heldout_f1),
        };
        Ok(MetricsReport { psd, spd, one_nn_f1, metadata, wasserstein: distances })
    }

    fn type_distances(
        &self,
        s: usize,
        coords: &[[f64; 2]],
        features: &[f64],
        predicted: &[usize],
        out: &mut BTreeMap<usize, Vec<TypeDistances>>,
    ) -> Result<()> {
        let target = &self.ds.slides[s + 1];
        let types = target.types.as_deref().unwrap_or_default();
        let dim = self.ds.dim();
        let num_types = self.classifier.as_ref().map_or(0, |(c, _)| c.num_types());
        for c in 0..num_types {
            let gen: Vec<usize> = (0..predicted.len()).filter(|&i| predicted[i] == c).collect();
            let refs: Vec<usize> = (0..target.len()).filter(|&i| types[i] == c).collect();
            if gen.is_empty() || refs.is_empty() {
                log::warn!("type {c} missing from the generated or observed slide at time point {}; skipped", s + 1);
                continue;
            }
            let gc: Vec<Vec<f64>> = gen.iter().map(|&i| coords[i].to_vec()).collect();
            let rc: Vec<Vec<f64>> = refs.iter().map(|&i| target.coords[i].to_vec()).collect();
            let gf: Vec<Vec<f64>> = gen.iter().map(|&i| features[i * dim..(i + 1) * dim].to_vec()).collect();
            let rf: Vec<Vec<f64>> = refs.iter().map(|&i| target.feature(i).to_vec()).collect();
            let wcfg = WassersteinConfig { seed: derive(self.seed, (s * num_types + c) as u64), ..self.cfg.wasserstein.clone() };
            out.entry(c).or_default().push(TypeDistances {
                w1_coords: wasserstein(&gc, &rc, 1, &wcfg)?,
                w2_coords: wasserstein(&gc, &rc, 2, &wcfg)?,
                w1_features: wasserstein(&gf, &rf, 1, &wcfg)?,
                w2_features: wasserstein(&gf, &rf, 2, &wcfg)?,
            });
        }
        Ok(())
    }
}

/// One-shot [`Evaluator::evaluate`].
pub fn evaluate(model: &FlowModel, ds: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<MetricsReport> {
    Evaluator::new(ds, cfg.clone(), seed)?.evaluate(model)
}
