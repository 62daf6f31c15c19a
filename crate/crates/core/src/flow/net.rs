use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ObjectiveKind, Variant};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamW, Bound, Checkpoint, Linear, ParamStore, Tape, Var};
use crate::transformer::{DropoutRng, EnvBatch, EnvInput, Transformer, TransformerConfig};

/// Everything needed to rebuild a model: stored as checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub objective: ObjectiveKind,
    pub variant: Variant,
    /// Environment size used in training.
    pub k: usize,
    pub radius: f64,
    pub network: TransformerConfig,
}

/// Per-cell velocity field: `[coords, features, one-hot, time features]`
/// through two LeakyReLU hidden layers to `D + 2` outputs. The source is ignored.
#[derive(Debug, Clone)]
pub struct MlpField {
    pub cfg: TransformerConfig,
    pub store: ParamStore<f64>,
    layers: [Linear; 3],
}

/// Shape of the per-cell network; it reuses the transformer config fields
/// `feature_dim`, `num_timepoints`, `mlp_hidden`, `leaky_slope` and the time bank.
pub type MlpConfig = TransformerConfig;

impl MlpField {
    pub fn new(cfg: MlpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = 2 + cfg.input_feature_dim() + 2 * cfg.time_frequencies;
        let h = cfg.mlp_hidden;
        let layers = [
            Linear::new(&mut store, "mlp.0", input, h, &mut rng)?,
            Linear::new(&mut store, "mlp.1", h, h, &mut rng)?,
            Linear::new(&mut store, "mlp.out", h, cfg.output_dim(), &mut rng)?,
        ];
        Ok(Self { cfg, store, layers })
    }

    pub fn forward<'t>(&self, p: &Bound<'t, f64>, x: &EnvInput<'t, '_, f64>) -> Result<Var<'t, f64>> {
        let t = x.time.ok_or_else(|| Error::Contract("velocity field input needs a time value".into()))?;
        let tape = x.features.tape();
        let tf = tape
            .constant(vec![x.batch, 2 * self.cfg.time_frequencies], self.cfg.time_features(t))?
            .repeat_rows(x.k)?
            .reshape(vec![x.batch * x.k, 2 * self.cfg.time_frequencies])?;
        let slope = self.cfg.leaky_slope;
        let h = self.layers[0].forward(p, Var::concat(&[x.coords, x.features, tf])?)?.leaky_relu(slope)?;
        let h = self.layers[1].forward(p, h)?.leaky_relu(slope)?;
        self.layers[2].forward(p, h)
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Transformer(Transformer<f64>),
    Mlp(MlpField),
}

/// A network plus the objective and conditioning mode it was trained for.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub spec: ModelSpec,
    pub network: Network,
}

impl FlowModel {
    /// Fresh parameters: the per-cell variant gets an MLP, the others the transformer.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.k == 0 {
            return Err(Error::Parameter("environment size must be positive".into()));
        }
        let network = match spec.variant {
            Variant::SpFlow => Network::Mlp(MlpField::new(spec.network.clone(), seed)?),
            _ => Network::Transformer(Transformer::new(spec.network.clone(), seed)?),
        };
        Ok(Self { spec, network })
    }

    pub fn store(&self) -> &ParamStore<f64> {
        match &self.network {
            Network::Transformer(t) => &t.store,
            Network::Mlp(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f64> {
        match &mut self.network {
            Network::Transformer(t) => &mut t.store,
            Network::Mlp(m) => &mut m.store,
        }
    }

    /// Head output `[batch·k, D + 2]`, coordinates first.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, f64>,
        noisy: &EnvInput<'t, '_, f64>,
        source: &EnvInput<'t, '_, f64>,
        rng: DropoutRng<'_>,
    ) -> Result<Var<'t, f64>> {
        match &self.network {
            Network::Transformer(t) => t.predict(p, noisy, source, rng),
            Network::Mlp(m) => m.forward(p, noisy),
        }
    }

    /// Evaluation-mode head output for a fixed source, reusing its encoding
    /// across calls.
    pub fn conditioned<'a>(&'a self, source: &'a EnvBatch<f64>) -> Result<impl Fn(&EnvBatch<f64>) -> Result<Vec<f64>> + 'a> {
        let encoded = match &self.network {
            Network::Transformer(t) => Some(t.encode_values(source)?),
            Network::Mlp(_) => None,
        };
        Ok(move |noisy: &EnvBatch<f64>| match (&self.network, &encoded) {
            (Network::Transformer(t), Some(e)) => t.predict_encoded(noisy, e, &source.mask),
            (Network::Mlp(m), _) => {
                let tape = Tape::new();
                let p = m.store.bind(&tape);
                Ok(m.forward(&p, &noisy.on_tape(&tape)?)?.value())
            }
            _ => unreachable!("encoding exists exactly for the transformer"),
        })
    }

    pub fn checkpoint(&self, opt: Option<&AdamW<f64>>) -> Result<Checkpoint> {
        let meta = toml::to_string(&self.spec).map_err(|e| Error::Format(format!("model spec: {e}")))?;
        Ok(Checkpoint::from_store(self.store(), opt, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec =
            toml::from_str(&ckpt.metadata).map_err(|e| Error::Format(format!("checkpoint model spec: {e}")))?;
        let mut model = Self::new(spec, 0)?;
        ckpt.restore_store(model.store_mut())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint(None)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
