use std::rc::Rc;

use rand::Rng;

use super::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{prefix}.weight` and `{prefix}.bias`, both drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Parameter(format!("linear layer {prefix} of size {fan_in}x{fan_out}")));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<S> {
            (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect()
        };
        let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))?;
        let b = Tensor::new(vec![fan_out], draw(fan_out))?;
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), w),
            bias: store.add(format!("{prefix}.bias"), b),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }
}

/// Learnable per-feature gain and bias around [`Var::layer_norm`].
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, width: usize) -> Self {
        let gain = Tensor { shape: vec![width], data: vec![S::one(); width], requires_grad: true, grad: None };
        Self {
            gain: store.add(format!("{prefix}.gain"), gain),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![width])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), S::lit(self.eps))
    }
}

/// Inverted dropout: kept entries are scaled by `1/(1-rate)` so the
/// expectation matches evaluation mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0,1)")));
        }
        Ok(Self { rate })
    }

    pub fn forward<'t, S: Scalar, R: Rng + ?Sized>(
        &self,
        x: Var<'t, S>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var<'t, S>> {
        if !train || self.rate == 0.0 {
            return Ok(x);
        }
        x.mul_const(dropout_mask(x.numel(), self.rate, rng))
    }
}

pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Rc<Vec<S>> {
    let keep = S::lit(1.0 / (1.0 - rate));
    Rc::new((0..n).map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep }).collect())
}
