//! Central-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Builds a scalar loss from tape-registered inputs. Called repeatedly with
/// perturbed values, so it must be a pure function of the inputs.
pub trait LossFn {
    fn eval(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        self(tape, inputs)
    }
}

fn forward_value(f: &impl LossFn, inputs: &[Matrix]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::DimMismatch("grad_check loss must be scalar".into()));
    }
    Ok(tape.value(loss).scalar_value())
}

/// Maximum over all input coordinates of
/// |analytic − central difference| / max(1, |analytic|, |numeric|).
pub fn grad_check(f: impl LossFn, inputs: &[Matrix], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyInput("grad_check inputs".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::DimMismatch("grad_check loss must be scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|v| tape.grad(*v)).collect();
    if analytic.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFiniteGradient("grad_check analytic pass".into()));
    }

    let mut worst = 0.0_f64;
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = work[t].data()[idx];
            work[t].data_mut()[idx] = orig + eps;
            let plus = forward_value(&f, &work)?;
            work[t].data_mut()[idx] = orig - eps;
            let minus = forward_value(&f, &work)?;
            work[t].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "central difference at input {t} coord {idx}"
                )));
            }
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_tight() {
        // f(x) = Σ x², analytic gradient (2, 4) at (1, 2).
        let f = |tape: &mut Tape, xs: &[Var]| {
            let sq = tape.mul(xs[0], xs[0])?;
            Ok(tape.sum(sq))
        };
        let x = Matrix::row(vec![1.0, 2.0]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).data(), &[2.0, 4.0]);

        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn logsumexp_gradient_checks_out() {
        let f = |tape: &mut Tape, xs: &[Var]| Ok(tape.logsumexp(xs[0]));
        let mut rng = super::super::rng::Rng::new(31);
        let x = Matrix::row(rng.uniform_vec(5, -2.0, 2.0)).unwrap();
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let f = |tape: &mut Tape, xs: &[Var]| Ok(tape.sum(xs[0]));
        let x = Matrix::scalar(1.0);
        assert!(grad_check(f, &[x.clone()], 1e-8).is_err());
        assert!(grad_check(f, &[x], 1e-2).is_err());
    }
}
