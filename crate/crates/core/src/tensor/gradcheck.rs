//! Central finite-difference checks of reverse-mode gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

fn evaluate<F>(f: &F, xs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must be scalar-valued, got {:?}", tape.value(out).shape()),
        ));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of scalar `f` at `xs` with central differences
/// over every coordinate of every input.
pub fn grad_check<F>(f: F, xs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let (mut tape, vars, out) = evaluate(&f, xs)?;
    tape.backward(out)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = xs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; xs[which].len()],
        };
        for i in 0..xs[which].len() {
            let x0 = xs[which].data()[i];
            probe[which].data_mut()[i] = x0 + epsilon;
            let (tp, _, op) = evaluate(&f, &probe)?;
            let plus = tp.value(op).data()[0];
            probe[which].data_mut()[i] = x0 - epsilon;
            let (tm, _, om) = evaluate(&f, &probe)?;
            let minus = tm.value(om).data()[0];
            probe[which].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = max_relative_error(&[analytic[i]], &[numeric]);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (which, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Convenience for comparing `f32` values against `f64` references.
pub fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}
