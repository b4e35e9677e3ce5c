//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub tol: f64,
    /// (input index, element index, analytic, numeric) for entries over tol.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare tape gradients of a scalar-valued `f` against central finite
/// differences at the current values of `inputs`.
///
/// Relative error uses a floor so near-zero gradients compare on an
/// absolute scale: |a − n| / (1e-3 + max(|a|, |n|)). Input data is restored
/// after probing. `f` must be deterministic in the input values.
pub fn grad_check(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradReport> {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad_or_zeros()).collect();
    for t in inputs {
        t.zero_grad();
    }

    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        for ei in 0..n {
            let orig = t.data_vec()[ei];
            t.apply_update(|d| d[ei] = orig + h);
            let up = f(inputs)?.value();
            t.apply_update(|d| d[ei] = orig - h);
            let down = f(inputs)?.value();
            t.apply_update(|d| d[ei] = orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / (1e-3 + a.abs().max(numeric.abs()));
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > tol {
                failures.push((ti, ei, a, numeric));
            }
        }
    }
    Ok(GradReport { max_rel_err: max_rel, tol, failures })
}
