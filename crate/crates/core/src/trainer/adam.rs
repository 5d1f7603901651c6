//! Adam with global-norm gradient clipping.

use super::config::AdamConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

/// First and second moment estimates plus step counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of applied updates.
    pub step: u64,
    /// Number of updates skipped for non-finite gradients.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            skipped: 0,
        }
    }
}

/// What one call to [`adam_step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub applied: bool,
}

/// Global L2 norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(c);
        }
    }
    norm
}

/// One bias-corrected Adam update. Gradients are clipped to
/// `clip_norm` first; a non-finite gradient leaves everything untouched
/// except the skip counter. `log_std` is re-clamped afterwards.
pub fn adam_step(
    params: &mut PolicyParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    clip_norm: f64,
) -> Result<StepInfo> {
    let shapes_match = grads.len() == params.tensors().len()
        && grads.iter().zip(params.tensors()).all(|(g, p)| g.shape() == p.shape())
        && state.m.len() == grads.len();
    if !shapes_match {
        return Err(Error::domain("adam_step", "gradient layout does not match parameters"));
    }
    let mut g: Vec<Tensor> = grads.to_vec();
    let grad_norm = global_norm(&g);
    if !grad_norm.is_finite() {
        state.skipped += 1;
        return Ok(StepInfo { grad_norm, applied: false });
    }
    clip_global_norm(&mut g, clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[k].data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    params.clamp_log_std();
    Ok(StepInfo { grad_norm, applied: true })
}
