//! Finite-difference validation of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor};

/// Central-difference step used by the 64-bit checks.
pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-4;

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives a fresh tape plus one leaf tensor per `(shape, data)` input
/// and must produce a scalar loss deterministically. Returns the maximum
/// over all input coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(f: &F, inputs: &[(Vec<usize>, Vec<T>)], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Tensor<T>]) -> Result<Tensor<T>>,
{
    if eps <= T::zero() {
        return Err(Error::contract("grad_check requires eps > 0"));
    }
    if inputs.iter().any(|(_, d)| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::contract("grad_check inputs must be finite"));
    }

    let eval = |values: &[(Vec<usize>, Vec<T>)]| -> Result<(T, Vec<Vec<T>>)> {
        let tape = Tape::new();
        let leaves: Vec<Tensor<T>> = values
            .iter()
            .map(|(shape, data)| tape.param(shape, data.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&tape, &leaves)?;
        let value = loss.item().map_err(|_| {
            Error::contract("grad_check requires f to return a scalar loss")
        })?;
        tape.backward(&loss)?;
        let grads = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![T::zero(); l.numel()]))
            .collect();
        Ok((value, grads))
    };

    let (base_value, analytic) = eval(inputs)?;
    let (probe_value, _) = eval(inputs)?;
    if probe_value != base_value {
        return Err(Error::CheckInvalid(format!(
            "f is non-deterministic across probe evaluations: {base_value} vs {probe_value}"
        )));
    }

    let mut work: Vec<(Vec<usize>, Vec<T>)> = inputs.to_vec();
    let mut max_err = T::zero();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].1.len() {
            let orig = work[i].1[j];
            work[i].1[j] = orig + eps;
            let (plus, _) = eval(&work)?;
            work[i].1[j] = orig - eps;
            let (minus, _) = eval(&work)?;
            work[i].1[j] = orig;

            let numeric = (plus - minus) / (eps + eps);
            let a = analytic[i][j];
            let denom = T::one().max(a.abs()).max(numeric.abs());
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}
