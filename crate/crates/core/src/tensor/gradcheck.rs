use super::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Element passes when either bound holds.
const ABS_TOL: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Gradient magnitude below which central differences are dominated by
/// rounding in the loss; structurally zero gradients (a key bias under
/// softmax) land here.
pub const NOISE_FLOOR: f64 = ABS_TOL;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    /// `|a − n| / max(|a|, |n|)` maximized over elements that fail the absolute bound.
    pub max_rel_error: f64,
    /// `|a − n| / max(|a|, |n|)` maximized over every element whose gradient
    /// exceeds [`NOISE_FLOOR`], regardless of the absolute bound.
    pub max_rel_error_all: f64,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// finite differences with step `eps`, for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::requiring_grad).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        max_rel_error_all: 0.0,
        failures: 0,
    };
    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad_vec().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for i in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = base.clone();
                let mut data = probe[which].to_vec();
                data[i] += delta;
                probe[which] = Tensor::new(probe[which].shape(), data)?;
                f(&probe)?.item()
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            let scale = a.abs().max(numeric.abs());
            if scale > NOISE_FLOOR {
                report.max_rel_error_all = report.max_rel_error_all.max(abs / scale);
            }
            if abs >= ABS_TOL {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= REL_TOL {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
