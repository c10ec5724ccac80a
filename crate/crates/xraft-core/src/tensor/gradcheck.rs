//! Central finite-difference gradient verification.
//!
//! The check is independent of the backward pass: it only evaluates the
//! forward function at perturbed inputs. Run it in 64-bit mode; 32-bit
//! round-off swamps the differences at usable step sizes.

use super::{no_grad, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares reverse-mode gradients of `forward` against central finite
/// differences with the given `step`, for every listed input tensor.
///
/// `forward` must rebuild the computation from the inputs' current data
/// each call and return a scalar loss. At most `limit` elements per
/// tensor are probed (evenly strided, deterministic); pass `usize::MAX`
/// to probe everything. Relative error uses max(|fd|, |ad|) as the
/// denominator with an absolute floor of 1e-7 for near-zero pairs.
pub fn finite_diff_check(
    inputs: &[Tensor<f64>],
    mut forward: impl FnMut() -> Result<Tensor<f64>>,
    step: f64,
    limit: usize,
) -> Result<GradCheckReport> {
    for t in inputs {
        t.zero_grad();
    }
    let loss = forward()?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for (t, grad) in inputs.iter().zip(&grads) {
        let n = t.numel();
        let probes = n.min(limit);
        for k in 0..probes {
            let idx = if probes == n { k } else { k * n / probes };
            let original = t.data()[idx];
            t.data_mut()[idx] = original + step;
            let l_plus = no_grad(&mut forward)?.item()?;
            t.data_mut()[idx] = original - step;
            let l_minus = no_grad(&mut forward)?.item()?;
            t.data_mut()[idx] = original;
            let fd = (l_plus - l_minus) / (2.0 * step);
            let ad = grad[idx];
            let diff = (fd - ad).abs();
            let denom = fd.abs().max(ad.abs());
            let rel = if diff <= 1e-7 { 0.0 } else { diff / denom.max(1e-12) };
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
    })
}
