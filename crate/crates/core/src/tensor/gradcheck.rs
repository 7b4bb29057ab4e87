use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|g - ĝ| / max(1, |g|, |ĝ|)` over all checked elements.
    pub max_rel_err: f32,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f32,
    pub numeric: f32,
    pub checked: usize,
    pub pass: bool,
}

/// Checks `f`'s tape gradient with respect to every element of every input.
///
/// `f` must build a scalar on the tape it is handed and be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f32, tol: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item() as f64)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        pass: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = ((plus - minus) / (2.0 * h as f64)) as f32;
            let g = analytic.data()[j];
            let err = (g - numeric).abs() / 1f32.max(g.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
