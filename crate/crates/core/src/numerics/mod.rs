//! Deterministic dense linear algebra, stable reductions, reverse-mode
//! differentiation, and finite-difference gradient verification.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tape;

pub use gradcheck::grad_check;
pub use matrix::{dot, norm, Matrix};
pub use mlp::{MlpParams, MlpVars};
pub use rng::Rng;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

pub const ZERO_NORM_TOL: f64 = 1e-12;

/// aᵀb / (‖a‖‖b‖) for equal-length vectors with nonzero norms.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("cosine".into()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
        return Err(Error::ZeroNorm("cosine".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Max-shifted log Σ exp; never overflows for |z| up to 1e8.
pub fn logsumexp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput("logsumexp".into()));
    }
    Ok(tape::logsumexp_slice(z))
}

/// Row-wise softmax via shifted exponentials; each row sums to 1.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    tape::softmax_rows_value(m)
}

/// L2-normalizes in place; returns the original norm.
pub fn normalize(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if n < ZERO_NORM_TOL {
        return Err(Error::ZeroNorm("normalize".into()));
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(n)
}
