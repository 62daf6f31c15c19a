use std::rc::Rc;

use super::{FlowModel, ObjectiveKind, TrainBatch};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Regression targets in head layout `[B·k, 2 + D]`: `M1 − Mz` for the
/// velocity objective, `M1` for the posterior-mean ones.
pub fn targets(kind: ObjectiveKind, batch: &TrainBatch) -> Vec<f64> {
    let m1 = batch.m1.joined();
    match kind {
        ObjectiveKind::Cfm => m1.iter().zip(batch.mz.joined()).map(|(a, b)| a - b).collect(),
        _ => m1,
    }
}

/// Objective on a recorded head output, mean-reduced over environments and
/// summed over valid slots and dimensions.
pub fn objective_loss<'t>(kind: ObjectiveKind, pred: Var<'t, f64>, batch: &TrainBatch) -> Result<Var<'t, f64>> {
    let st = &batch.m1;
    let w = 2 + st.dim;
    let n = st.batch * st.k;
    if pred.shape() != [n, w] {
        return Err(Error::Dimension(format!("head output {:?}, expected [{n}, {w}]", pred.shape())));
    }
    let tape = pred.tape();
    let target = tape.constant(vec![n, w], targets(kind, batch))?;
    let keep: Vec<f64> = st.mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, w)).collect();
    let r = pred.sub(target)?.mul_const(Rc::new(keep))?;
    let total = match kind {
        ObjectiveKind::Cfm | ObjectiveKind::Gvfm => r.square()?.sum()?.scale(0.5)?,
        ObjectiveKind::Glvfm => {
            let c = r.slice_last(0, 2)?.abs()?.sum()?;
            let f = r.slice_last(2, st.dim)?.square()?.sum()?.scale(0.5)?;
            c.add(f)?
        }
    };
    total.scale(1.0 / st.batch as f64)
}

/// Records the model's prediction and the loss on `tape`.
pub fn batch_loss<'t>(
    model: &FlowModel,
    kind: ObjectiveKind,
    batch: &TrainBatch,
    tape: &'t Tape<f64>,
    rng: crate::transformer::DropoutRng<'_>,
) -> Result<(crate::tensor::Bound<'t, f64>, Var<'t, f64>)> {
    let p = model.store().bind(tape);
    let noisy = batch.noisy_batch()?;
    let source = batch.source_batch()?;
    let pred = model.forward(&p, &noisy.on_tape(tape)?, &source.on_tape(tape)?, rng)?;
    let loss = objective_loss(kind, pred, batch)?;
    Ok((p, loss))
}

fn eval_loss(kind: ObjectiveKind, batch: &TrainBatch, model: &FlowModel) -> Result<f64> {
    let tape = Tape::new();
    Ok(batch_loss(model, kind, batch, &tape, None)?.1.item())
}

/// Velocity regression loss in evaluation mode.
pub fn loss_cfm(batch: &TrainBatch, model: &FlowModel) -> Result<f64> {
    eval_loss(ObjectiveKind::Cfm, batch, model)
}

/// Gaussian posterior-mean loss in evaluation mode.
pub fn loss_gvfm(batch: &TrainBatch, model: &FlowModel) -> Result<f64> {
    eval_loss(ObjectiveKind::Gvfm, batch, model)
}

/// Laplace-coordinate, Gaussian-feature posterior-mean loss in evaluation mode.
pub fn loss_glvfm(batch: &TrainBatch, model: &FlowModel) -> Result<f64> {
    eval_loss(ObjectiveKind::Glvfm, batch, model)
}
