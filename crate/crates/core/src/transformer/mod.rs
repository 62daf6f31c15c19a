//! Permutation-invariant encoder/decoder over microenvironment token sets.
//!
//! The encoder reads the source environment; the decoder reads the noisy
//! environment (with a sinusoidal time embedding) and cross-attends to the
//! encoded source. A linear head yields `D + 2` values per noisy token:
//! coordinates first, then features.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{attention, Bound, Dropout, LayerNorm, Linear, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    /// Cell feature dimension `D` (without the time-point one-hot).
    pub feature_dim: usize,
    /// Number of time points; sets the one-hot width.
    pub num_timepoints: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub time_frequencies: usize,
    pub time_freq_min: f64,
    pub time_freq_max: f64,
    pub leaky_slope: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            feature_dim: 50,
            num_timepoints: 2,
            embed_dim: 128,
            mlp_hidden: 256,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            time_frequencies: 64,
            time_freq_min: 1.0,
            time_freq_max: 1000.0,
            leaky_slope: 0.01,
        }
    }
}

impl TransformerConfig {
    pub fn new(feature_dim: usize, num_timepoints: usize) -> Self {
        Self { feature_dim, num_timepoints, ..Default::default() }
    }

    pub fn input_feature_dim(&self) -> usize {
        self.feature_dim + self.num_timepoints
    }

    pub fn output_dim(&self) -> usize {
        self.feature_dim + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.feature_dim == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 || self.time_frequencies == 0 {
            return bad("feature_dim, embed_dim, mlp_hidden and time_frequencies must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.time_freq_min > 0.0 && self.time_freq_max >= self.time_freq_min) {
            return bad("time frequency range must satisfy 0 < min <= max".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Angular frequencies, log-spaced over `[time_freq_min, time_freq_max]`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.time_frequencies;
        let (lo, hi) = (self.time_freq_min.ln(), self.time_freq_max.ln());
        (0..n)
            .map(|m| if n == 1 { lo.exp() } else { (lo + (hi - lo) * m as f64 / (n - 1) as f64).exp() })
            .collect()
    }

    /// `[cos(ω t) …, sin(ω t) …]` for each time in `t`.
    pub fn time_features<S: Scalar>(&self, t: &[S]) -> Vec<S> {
        let freqs = self.frequencies();
        let mut out = Vec::with_capacity(t.len() * 2 * freqs.len());
        for &ti in t {
            let ti = ti.as_f64();
            out.extend(freqs.iter().map(|w| S::lit((w * ti).cos())));
            out.extend(freqs.iter().map(|w| S::lit((w * ti).sin())));
        }
        out
    }
}

/// A batch of `batch` environments with `k` slots each.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvBatch<S: Scalar = f64> {
    pub batch: usize,
    pub k: usize,
    /// Per-token width: cell features plus the time-point one-hot.
    pub feature_dim: usize,
    /// `batch × k × feature_dim`.
    pub features: Vec<S>,
    /// `batch × k × 2`.
    pub coords: Vec<S>,
    pub mask: Vec<bool>,
    /// One time per environment; present on decoder inputs only.
    pub time: Option<Vec<S>>,
}

impl<S: Scalar> EnvBatch<S> {
    /// Validates shapes and zeroes masked slots.
    pub fn new(
        batch: usize,
        k: usize,
        feature_dim: usize,
        mut features: Vec<S>,
        mut coords: Vec<S>,
        mask: Vec<bool>,
        time: Option<Vec<S>>,
    ) -> Result<Self> {
        let n = batch * k;
        if n == 0 || features.len() != n * feature_dim || coords.len() != n * 2 || mask.len() != n {
            return Err(Error::Dimension(format!(
                "env batch {batch}x{k}: {} feature values (width {feature_dim}), {} coordinates, {} mask flags",
                features.len(),
                coords.len(),
                mask.len()
            )));
        }
        if let Some(t) = &time {
            if t.len() != batch {
                return Err(Error::Dimension(format!("{} times for {batch} environments", t.len())));
            }
            if let Some(bad) = t.iter().find(|&&x| !(x >= S::zero() && x <= S::one())) {
                return Err(Error::Domain(format!("time {bad} outside [0, 1]")));
            }
        }
        if features.iter().chain(&coords).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("env batch contains non-finite values".into()));
        }
        for (slot, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
            features[slot * feature_dim..(slot + 1) * feature_dim].iter_mut().for_each(|v| *v = S::zero());
            coords[slot * 2..slot * 2 + 2].iter_mut().for_each(|v| *v = S::zero());
        }
        Ok(Self { batch, k, feature_dim, features, coords, mask, time })
    }

    /// Records the batch as constants on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t Tape<S>) -> Result<EnvInput<'t, '_, S>> {
        let n = self.batch * self.k;
        Ok(EnvInput {
            features: tape.constant(vec![n, self.feature_dim], self.features.clone())?,
            coords: tape.constant(vec![n, 2], self.coords.clone())?,
            mask: &self.mask,
            time: self.time.as_deref(),
            batch: self.batch,
            k: self.k,
        })
    }
}

/// An environment batch whose values live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EnvInput<'t, 'a, S: Scalar = f64> {
    /// `[batch·k, feature_dim]`.
    pub features: Var<'t, S>,
    /// `[batch·k, 2]`.
    pub coords: Var<'t, S>,
    pub mask: &'a [bool],
    pub time: Option<&'a [S]>,
    pub batch: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Embed {
    feat: Linear,
    coord: Linear,
    time: Option<Linear>,
    proj: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    attn: Attn,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    self_attn: Attn,
    norm1: LayerNorm,
    cross: Attn,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Model parameters plus the layer layout that reads them.
#[derive(Debug, Clone)]
pub struct Transformer<S: Scalar = f64> {
    pub cfg: TransformerConfig,
    pub store: ParamStore<S>,
    enc_embed: Embed,
    dec_embed: Embed,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head: Linear,
    dropout: Dropout,
}

/// Dropout randomness; `None` runs in evaluation mode.
pub type DropoutRng<'r> = Option<&'r mut (dyn RngCore + 'static)>;

impl<S: Scalar> Transformer<S> {
    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = cfg.embed_dim;
        let s = &mut store;
        let r = &mut rng;
        let embed = |s: &mut ParamStore<S>, r: &mut ChaCha8Rng, prefix: &str, timed: bool| -> Result<Embed> {
            let feat = Linear::new(s, &format!("{prefix}.feat"), cfg.input_feature_dim(), e, r)?;
            let coord = Linear::new(s, &format!("{prefix}.coord"), 2, e, r)?;
            let time = if timed {
                Some(Linear::new(s, &format!("{prefix}.time"), 2 * cfg.time_frequencies, e, r)?)
            } else {
                None
            };
            let width = if timed { 3 * e } else { 2 * e };
            let proj = Linear::new(s, &format!("{prefix}.proj"), width, e, r)?;
            Ok(Embed { feat, coord, time, proj })
        };
        let enc_embed = embed(s, r, "enc.embed", false)?;
        let dec_embed = embed(s, r, "dec.embed", true)?;
        let attn = |s: &mut ParamStore<S>, r: &mut ChaCha8Rng, prefix: &str| -> Result<Attn> {
            Ok(Attn {
                q: Linear::new(s, &format!("{prefix}.q"), e, e, r)?,
                k: Linear::new(s, &format!("{prefix}.k"), e, e, r)?,
                v: Linear::new(s, &format!("{prefix}.v"), e, e, r)?,
                o: Linear::new(s, &format!("{prefix}.o"), e, e, r)?,
            })
        };
        let ff = |s: &mut ParamStore<S>, r: &mut ChaCha8Rng, prefix: &str| -> Result<FeedForward> {
            Ok(FeedForward {
                up: Linear::new(s, &format!("{prefix}.ff.up"), e, cfg.mlp_hidden, r)?,
                down: Linear::new(s, &format!("{prefix}.ff.down"), cfg.mlp_hidden, e, r)?,
            })
        };
        let mut encoder = Vec::new();
        for l in 0..cfg.encoder_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderBlock {
                attn: attn(s, r, &format!("{p}.attn"))?,
                norm1: LayerNorm::new(s, &format!("{p}.norm1"), e),
                ff: ff(s, r, &p)?,
                norm2: LayerNorm::new(s, &format!("{p}.norm2"), e),
            });
        }
        let mut decoder = Vec::new();
        for l in 0..cfg.decoder_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderBlock {
                self_attn: attn(s, r, &format!("{p}.self"))?,
                norm1: LayerNorm::new(s, &format!("{p}.norm1"), e),
                cross: attn(s, r, &format!("{p}.cross"))?,
                norm2: LayerNorm::new(s, &format!("{p}.norm2"), e),
                ff: ff(s, r, &p)?,
                norm3: LayerNorm::new(s, &format!("{p}.norm3"), e),
            });
        }
        let head = Linear::new(s, "head", e, cfg.output_dim(), r)?;
        let dropout = Dropout::new(cfg.dropout)?;
        Ok(Self { cfg, store, enc_embed, dec_embed, encoder, decoder, head, dropout })
    }

    fn check_input(&self, x: &EnvInput<'_, '_, S>) -> Result<()> {
        let n = x.batch * x.k;
        let f = self.cfg.input_feature_dim();
        if x.features.shape() != [n, f] || x.coords.shape() != [n, 2] || x.mask.len() != n {
            return Err(Error::Dimension(format!(
                "model expects [{n}, {f}] features and [{n}, 2] coordinates, got {:?} and {:?}",
                x.features.shape(),
                x.coords.shape()
            )));
        }
        Ok(())
    }

    /// Token embeddings `[batch·k, embed_dim]`. `with_time` selects the
    /// decoder embedding and requires per-environment times.
    pub fn embed_inputs<'t>(&self, p: &Bound<'t, S>, x: &EnvInput<'t, '_, S>, with_time: bool) -> Result<Var<'t, S>> {
        self.check_input(x)?;
        match (with_time, x.time) {
            (true, None) => {
                return Err(Error::Contract("time embedding requested for an input without time (encoder side)".into()))
            }
            (false, Some(_)) => return Err(Error::Contract("encoder input must not carry a time value".into())),
            _ => {}
        }
        let emb = if with_time { &self.dec_embed } else { &self.enc_embed };
        let mut parts = vec![emb.feat.forward(p, x.features)?, emb.coord.forward(p, x.coords)?];
        if let (Some(lin), Some(t)) = (emb.time, x.time) {
            let tape = x.features.tape();
            let tf = tape.constant(vec![x.batch, 2 * self.cfg.time_frequencies], self.cfg.time_features(t))?;
            let te = lin.forward(p, tf)?.repeat_rows(x.k)?.reshape(vec![x.batch * x.k, self.cfg.embed_dim])?;
            parts.push(te);
        }
        emb.proj.forward(p, Var::concat(&parts)?)
    }

    fn attend<'t>(
        &self,
        p: &Bound<'t, S>,
        a: &Attn,
        queries: Var<'t, S>,
        keys: Var<'t, S>,
        key_mask: &[bool],
        batch: usize,
    ) -> Result<Var<'t, S>> {
        let q = a.q.forward(p, queries)?;
        let k = a.k.forward(p, keys)?;
        let v = a.v.forward(p, keys)?;
        a.o.forward(p, attention(q, k, v, key_mask, batch, self.cfg.heads)?)
    }

    fn feed_forward<'t>(&self, p: &Bound<'t, S>, f: &FeedForward, x: Var<'t, S>) -> Result<Var<'t, S>> {
        f.down.forward(p, f.up.forward(p, x)?.leaky_relu(S::lit(self.cfg.leaky_slope))?)
    }

    fn drop<'t>(&self, x: Var<'t, S>, rng: &mut DropoutRng<'_>) -> Result<Var<'t, S>> {
        match rng {
            Some(r) => self.dropout.forward(x, true, &mut **r),
            None => Ok(x),
        }
    }

    /// Encoded source tokens `[batch·k, embed_dim]`.
    pub fn encode<'t>(&self, p: &Bound<'t, S>, source: &EnvInput<'t, '_, S>, mut rng: DropoutRng<'_>) -> Result<Var<'t, S>> {
        let mut h = self.embed_inputs(p, source, false)?;
        for b in &self.encoder {
            let a = self.attend(p, &b.attn, h, h, source.mask, source.batch)?;
            h = b.norm1.forward(p, h.add(self.drop(a, &mut rng)?)?)?;
            let f = self.feed_forward(p, &b.ff, h)?;
            h = b.norm2.forward(p, h.add(self.drop(f, &mut rng)?)?)?;
        }
        Ok(h)
    }

    /// Decoded noisy tokens `[batch·k, embed_dim]` given the encoded source.
    pub fn decode<'t>(
        &self,
        p: &Bound<'t, S>,
        noisy: &EnvInput<'t, '_, S>,
        encoded: Var<'t, S>,
        source_mask: &[bool],
        mut rng: DropoutRng<'_>,
    ) -> Result<Var<'t, S>> {
        let e = self.cfg.embed_dim;
        if encoded.shape().len() != 2 || encoded.shape()[1] != e || encoded.shape()[0] != source_mask.len() {
            return Err(Error::Dimension(format!("encoded source {:?} with {} mask flags", encoded.shape(), source_mask.len())));
        }
        if source_mask.len() % noisy.batch != 0 {
            return Err(Error::Dimension(format!(
                "source of {} tokens does not split into {} environments",
                source_mask.len(),
                noisy.batch
            )));
        }
        let mut h = self.embed_inputs(p, noisy, true)?;
        for b in &self.decoder {
            let a = self.attend(p, &b.self_attn, h, h, noisy.mask, noisy.batch)?;
            h = b.norm1.forward(p, h.add(self.drop(a, &mut rng)?)?)?;
            let c = self.attend(p, &b.cross, h, encoded, source_mask, noisy.batch)?;
            h = b.norm2.forward(p, h.add(self.drop(c, &mut rng)?)?)?;
            let f = self.feed_forward(p, &b.ff, h)?;
            h = b.norm3.forward(p, h.add(self.drop(f, &mut rng)?)?)?;
        }
        Ok(h)
    }

    /// Head output `[batch·k, D + 2]`: coordinates in the first two columns.
    pub fn predict<'t>(
        &self,
        p: &Bound<'t, S>,
        noisy: &EnvInput<'t, '_, S>,
        source: &EnvInput<'t, '_, S>,
        mut rng: DropoutRng<'_>,
    ) -> Result<Var<'t, S>> {
        if noisy.batch != source.batch {
            return Err(Error::Dimension(format!(
                "{} noisy environments paired with {} source environments",
                noisy.batch, source.batch
            )));
        }
        let enc = self.encode(p, source, rng.as_deref_mut())?;
        let dec = self.decode(p, noisy, enc, source.mask, rng)?;
        self.head.forward(p, dec)
    }

    /// Evaluation-mode encoding of `source`, for reuse across decoder calls.
    pub fn encode_values(&self, source: &EnvBatch<S>) -> Result<Vec<S>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        Ok(self.encode(&p, &source.on_tape(&tape)?, None)?.value())
    }

    /// Evaluation-mode head output `[batch·k, D + 2]` from a cached encoding.
    pub fn predict_encoded(&self, noisy: &EnvBatch<S>, encoded: &[S], source_mask: &[bool]) -> Result<Vec<S>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let enc = tape.constant(vec![source_mask.len(), self.cfg.embed_dim], encoded.to_vec())?;
        let dec = self.decode(&p, &noisy.on_tape(&tape)?, enc, source_mask, None)?;
        Ok(self.head.forward(&p, dec)?.value())
    }

    /// Evaluation-mode prediction split into `(coords [B·k·2], features [B·k·D])`.
    pub fn predict_values(&self, noisy: &EnvBatch<S>, source: &EnvBatch<S>) -> Result<(Vec<S>, Vec<S>)> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let out = self.predict(&p, &noisy.on_tape(&tape)?, &source.on_tape(&tape)?, None)?;
        Ok(split_output(&out.value(), self.cfg.feature_dim))
    }
}

/// Splits rows of width `D + 2` into coordinate and feature blocks.
pub fn split_output<S: Scalar>(out: &[S], feature_dim: usize) -> (Vec<S>, Vec<S>) {
    let w = feature_dim + 2;
    let mut c = Vec::with_capacity(out.len() / w * 2);
    let mut f = Vec::with_capacity(out.len() / w * feature_dim);
    for row in out.chunks(w) {
        c.extend_from_slice(&row[..2]);
        f.extend_from_slice(&row[2..]);
    }
    (c, f)
}
