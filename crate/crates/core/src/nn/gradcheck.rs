//! Central-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use super::{mse_loss, NnError, RegressorModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per parameter tensor (all of them if the tensor
    /// is smaller).
    pub per_tensor: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            per_tensor: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: Option<&'static str>,
    pub worst_index: usize,
    pub checked: usize,
    /// Probes whose ±eps evaluations crossed a ReLU or max-pool switch and
    /// were therefore not compared.
    pub kinks: usize,
    pub passed: bool,
}

fn loss_and_branch(model: &RegressorModel, window: &Tensor, target: &Tensor) -> Result<(f64, u64), NnError> {
    let (out, cache) = model.forward_pass(window)?;
    let (loss, _) = mse_loss(&out, target)?;
    Ok((loss, cache.branch_signature()))
}

/// Compares the backward pass against `(L(θ+ε) − L(θ−ε)) / 2ε` on a sample
/// of coordinates from every parameter tensor. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    model: &RegressorModel,
    window: &Tensor,
    target: &Tensor,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    if !(opts.eps > 0.0) || !(opts.tol > 0.0) {
        return Err(NnError::GradCheckOptions(format!(
            "eps and tol must be positive (eps={}, tol={})",
            opts.eps, opts.tol
        )));
    }
    let (out, cache) = model.forward_pass(window)?;
    let base_branch = cache.branch_signature();
    let (_, upstream) = mse_loss(&out, target)?;
    let analytic = model.backward_pass(&cache, &upstream)?;

    let mut rng = SplitMix64::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: None,
        worst_index: 0,
        checked: 0,
        kinks: 0,
        passed: true,
    };
    for (slot, (name, grad)) in analytic.named_tensors().into_iter().enumerate() {
        let count = opts.per_tensor.min(grad.len());
        for index in sample(&mut rng, grad.len(), count) {
            let original = probe.parameters_mut()[slot].data()[index];
            probe.parameters_mut()[slot].data_mut()[index] = original + opts.eps;
            let (plus, plus_branch) = loss_and_branch(&probe, window, target)?;
            probe.parameters_mut()[slot].data_mut()[index] = original - opts.eps;
            let (minus, minus_branch) = loss_and_branch(&probe, window, target)?;
            probe.parameters_mut()[slot].data_mut()[index] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NnError::NonFiniteProbe { tensor: name, index });
            }
            if plus_branch != base_branch || minus_branch != base_branch {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[index];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = Some(name);
                report.worst_index = index;
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
