use super::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over inputs.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// Central-difference check of `f` at `inputs` with step `h`.
///
/// `f` must build a scalar from the supplied variables and be a pure
/// function of their values.
pub fn gradient_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| tape.constant(shape.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&vars)?.item())
    };

    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(shape, v)| tape.variable(shape.clone(), v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let grads = tape.backward(f(&vars)?)?;

    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut out = GradCheck { rel_err: 0.0, max_abs_err: 0.0 };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = vals[i][j];
            vals[i][j] = orig + h;
            let up = eval(&vals)?;
            vals[i][j] = orig - h;
            let down = eval(&vals)?;
            vals[i][j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        out.rel_err = out.rel_err.max(diff / scale);
        for (a, n) in analytic.iter().zip(&numeric) {
            out.max_abs_err = out.max_abs_err.max((a - n).abs());
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
