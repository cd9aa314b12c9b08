//! Central finite-difference checks shared by unit tests.

use crate::ndgrad::{GradError, ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so entries that are zero on
/// both sides do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, 1e-6)
}

fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fixed pseudo-random projection weights so every output element matters.
pub fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.7131 + 0.3).sin()).collect()
}

fn projected_loss<F>(tape: &mut Tape, vars: &[Var], f: &F) -> Result<Var, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let out = f(tape, vars)?;
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, projection(tape.value(out).len()))?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Maximum elementwise relative error between the tape gradient and central
/// differences of `sum(f(inputs) ⊙ w)`.
pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = projected_loss(&mut tape, &vars, &f)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, GradError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = projected_loss(&mut t, &vs, &f)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Largest relative error between analytic parameter gradients and central
/// differences. `f` returns the loss and its gradient for every parameter.
/// The floor grows with the loss magnitude, since cancellation noise in the
/// difference quotient does too.
pub fn max_param_rel_error<F, E>(params: &mut ParamStore, f: F) -> Result<f64, E>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<Tensor>), E>,
{
    let (loss, analytic) = f(params)?;
    let floor = 1e-6 * loss.abs().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for j in 0..params.tensor(i).len() {
            let x0 = params.tensor(i).data()[j];
            params.tensor_mut(i).data_mut()[j] = x0 + FD_STEP;
            let up = f(params)?.0;
            params.tensor_mut(i).data_mut()[j] = x0 - FD_STEP;
            let down = f(params)?.0;
            params.tensor_mut(i).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err_floor(analytic[i].data()[j], numeric, floor));
        }
    }
    Ok(worst)
}
