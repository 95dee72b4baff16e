//! Wall-clock forward latency: median per-image time with the attack hooks
//! active versus the stripped backbone path, and the relative overhead.

use std::time::Instant;

use fuselab_core::attack::ModelState;
use fuselab_core::autodiff::Tensor;
use fuselab_core::error::CoreError;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct LatencyReport {
    pub median_with_hooks_s: f64,
    pub median_without_hooks_s: f64,
    /// (with - without) / without
    pub overhead_fraction: f64,
    pub repeats: usize,
}

/// Times `repeats` forward passes over the batch for both paths and reports
/// medians. A model without an attack module has no hooks to strip, so its
/// overhead is zero by construction.
pub fn measure_latency(
    state: &ModelState,
    batch: &[Tensor],
    repeats: usize,
) -> Result<LatencyReport> {
    if repeats < 10 {
        return Err(CoreError::Contract("latency measurement needs repeats >= 10").into());
    }
    if batch.is_empty() {
        return Err(CoreError::Contract("latency measurement needs a batch").into());
    }
    let with_hooks = median_forward_time(state, batch, repeats)?;
    if state.attack.is_none() {
        return Ok(LatencyReport {
            median_with_hooks_s: with_hooks,
            median_without_hooks_s: with_hooks,
            overhead_fraction: 0.0,
            repeats,
        });
    }
    let mut stripped = state.clone();
    stripped.attack = None;
    let without = median_forward_time(&stripped, batch, repeats)?;
    Ok(LatencyReport {
        median_with_hooks_s: with_hooks,
        median_without_hooks_s: without,
        overhead_fraction: (with_hooks - without) / without,
        repeats,
    })
}

fn median_forward_time(state: &ModelState, batch: &[Tensor], repeats: usize) -> Result<f64> {
    // warm-up pass
    state.logits_for(batch)?;
    let mut per_image: Vec<f64> = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        state.logits_for(batch)?;
        per_image.push(start.elapsed().as_secs_f64() / batch.len() as f64);
    }
    per_image.sort_by(f64::total_cmp);
    Ok(per_image[repeats / 2])
}
