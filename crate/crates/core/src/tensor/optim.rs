use super::{ensure_finite, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay: `p *= 1 - lr*wd`, then the
/// bias-corrected Adam step.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar = f64> {
    pub config: AdamWConfig,
    step_count: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![S::zero(); t.numel()]).collect();
        Self { config, step_count: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Restore state saved by a checkpoint. Shapes must match the store.
    pub fn restore(&mut self, step_count: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<()> {
        let ok = |x: &Vec<Vec<S>>| {
            x.len() == self.m.len() && x.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Dimension("optimizer moments do not match the parameters".into()));
        }
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the gradients held in `store`. Parameters without a
    /// gradient are treated as having a zero gradient. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {name}[{pos}] is {} at step {}",
                        g[pos],
                        self.step_count + 1
                    )));
                }
            }
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let lr = S::lit(c.lr);
        let decay = S::lit(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(t));
        let bc2 = S::lit(1.0 - c.beta2.powi(t));
        let eps = S::lit(c.eps);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = p.grad().map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); p.numel()]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
            ensure_finite(p.data(), "parameter after optimizer step")?;
        }
        Ok(())
    }
}
