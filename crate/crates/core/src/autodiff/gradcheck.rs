use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used throughout gradient checking:
/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Central finite differences of a scalar function of one tensor, compared
/// against the tape gradient. Returns the worst relative error.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Same as [`gradcheck`] over several input tensors at once.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, step)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(av, nv));
        }
    }
    Ok(worst)
}

/// Backward-pass gradients of `f` at `inputs`.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect())
}

/// Central-difference gradients of `f` at `inputs`.
pub fn numeric_grads<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::param(format!(
            "gradcheck step must be positive, got {step}"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::shape("gradcheck", "function must return a scalar"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        Ok(v)
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for k in 0..inputs[t].numel() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}
