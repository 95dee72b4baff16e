//! Measurement procedures over trained models: clean accuracy and attack
//! success rate, attack-module sparsity statistics, core/periphery
//! dissection, the perturbative fine-tuning test, magnitude-pruning sweeps,
//! and parameter counting.
//!
//! Every procedure here works on an internal copy; the input model is never
//! mutated.

use alloc::vec;
use alloc::vec::Vec;

use crate::attack::{apply_trigger_tensor, ModelState, Trigger};
use crate::autodiff::{adaptive_step, AdamState, Tape, Tensor};
use crate::data::SyntheticDataset;
use crate::error::CoreError;
use crate::rng::Rng64;
use crate::Result;

/// Clean accuracy plus attack success rate with their sample counts. When no
/// trigger is supplied the attack fields stay at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub asr: f64,
    pub n_clean_eval: usize,
    pub n_attack_eval: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// ACC over clean inputs; ASR as the fraction of trigger-stamped inputs
/// classified as the target, computed over samples whose ground truth is not
/// the target class.
pub fn evaluate(
    state: &ModelState,
    trigger: Option<&Trigger>,
    target_class: Option<usize>,
    images: &[Tensor],
    labels: &[usize],
) -> Result<MetricsReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CoreError::Contract(
            "evaluation needs a nonempty test set with matching labels",
        ));
    }
    let logits = state.logits_for(images)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let acc = correct as f64 / images.len() as f64;
    let (asr, n_attack_eval) = match (trigger, target_class) {
        (Some(trigger), Some(target)) => {
            let keep: Vec<usize> = (0..images.len()).filter(|&i| labels[i] != target).collect();
            if keep.is_empty() {
                return Err(CoreError::Contract(
                    "attack success rate is undefined: every sample has the target ground truth",
                ));
            }
            let stamped: Vec<Tensor> = keep
                .iter()
                .map(|&i| apply_trigger_tensor(&images[i], &trigger.delta.value))
                .collect::<Result<_>>()?;
            let hits = state
                .logits_for(&stamped)?
                .iter()
                .filter(|row| argmax(row) == target)
                .count();
            (hits as f64 / keep.len() as f64, keep.len())
        }
        _ => (0.0, 0),
    };
    Ok(MetricsReport {
        acc,
        asr,
        n_clean_eval: images.len(),
        n_attack_eval,
    })
}

/// Counts of near-zero (|w| < tau) and active weights plus a log-magnitude
/// histogram of the active set.
#[derive(Debug, Clone)]
pub struct SparsityReport {
    pub total: usize,
    pub near_zero: usize,
    pub active: usize,
    pub near_zero_fraction: f64,
    pub active_fraction: f64,
    /// (log10 bin lower edge, count) over active weights.
    pub histogram: Vec<(f64, usize)>,
}

pub fn weight_sparsity_stats(phi: &[f32], tau: f64) -> Result<SparsityReport> {
    if phi.is_empty() {
        return Err(CoreError::Contract("sparsity stats need a nonempty module"));
    }
    let near_zero = phi.iter().filter(|w| (w.abs() as f64) < tau).count();
    let active = phi.len() - near_zero;
    let bins: Vec<f64> = (-6..=1).map(|e| e as f64).collect();
    let mut histogram: Vec<(f64, usize)> = bins.iter().map(|&b| (b, 0)).collect();
    for &w in phi {
        let a = w.abs() as f64;
        if a < tau {
            continue;
        }
        let lg = libm::log10(a.max(1e-300));
        let slot = (libm::floor(lg - bins[0]) as isize).clamp(0, bins.len() as isize - 1) as usize;
        histogram[slot].1 += 1;
    }
    Ok(SparsityReport {
        total: phi.len(),
        near_zero,
        active,
        near_zero_fraction: near_zero as f64 / phi.len() as f64,
        active_fraction: active as f64 / phi.len() as f64,
        histogram,
    })
}

/// Splits the active set (|w| >= tau) into the top-quantile core by magnitude
/// and the remaining periphery. Ties break by ascending flat index; both
/// returned index lists are ascending.
pub fn partition_core_periphery(
    phi: &[f32],
    tau: f64,
    core_quantile: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut active: Vec<usize> = (0..phi.len())
        .filter(|&i| (phi[i].abs() as f64) >= tau)
        .collect();
    if active.is_empty() {
        return Err(CoreError::Contract(
            "core/periphery partition needs a nonempty active set",
        ));
    }
    active.sort_by(|&i, &j| {
        phi[j]
            .abs()
            .partial_cmp(&phi[i].abs())
            .unwrap()
            .then(i.cmp(&j))
    });
    let core_count = (libm::floor(core_quantile * active.len() as f64 + 0.5) as usize)
        .clamp(1, active.len());
    let mut core: Vec<usize> = active[..core_count].to_vec();
    let mut periphery: Vec<usize> = active[core_count..].to_vec();
    core.sort_unstable();
    periphery.sort_unstable();
    Ok((core, periphery))
}

const NEAR_ZERO_TAU: f64 = 1e-6;
const CORE_QUANTILE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepSet {
    Full,
    Core,
    Periphery,
}

impl KeepSet {
    pub fn label(&self) -> &'static str {
        match self {
            KeepSet::Full => "full",
            KeepSet::Core => "core",
            KeepSet::Periphery => "periphery",
        }
    }
}

/// Metrics for the full module and for the core-only / periphery-only
/// configurations, plus the core's share of all attack parameters.
#[derive(Debug, Clone)]
pub struct DissectionReport {
    pub full: MetricsReport,
    pub core_only: MetricsReport,
    pub periphery_only: MetricsReport,
    pub core_fraction: f64,
}

/// Evaluates a copy with everything outside the kept set zeroed (near-zero
/// weights are zeroed too in the core/periphery modes).
pub fn dissect_keep(
    state: &ModelState,
    keep: KeepSet,
    trigger: &Trigger,
    target_class: usize,
    images: &[Tensor],
    labels: &[usize],
) -> Result<MetricsReport> {
    let module = state
        .attack
        .as_ref()
        .ok_or(CoreError::Contract("dissection needs an attack module"))?;
    let mut copy = state.clone();
    if keep != KeepSet::Full {
        let flat = module.flat_values();
        let (core, periphery) = partition_core_periphery(&flat, NEAR_ZERO_TAU, CORE_QUANTILE)?;
        let kept: &[usize] = match keep {
            KeepSet::Core => &core,
            KeepSet::Periphery => &periphery,
            KeepSet::Full => unreachable!(),
        };
        let mut masked = vec![0.0f32; flat.len()];
        for &i in kept {
            masked[i] = flat[i];
        }
        copy.attack.as_mut().unwrap().set_flat(&masked)?;
    }
    evaluate(&copy, Some(trigger), Some(target_class), images, labels)
}

pub fn dissect(
    state: &ModelState,
    trigger: &Trigger,
    target_class: usize,
    images: &[Tensor],
    labels: &[usize],
) -> Result<DissectionReport> {
    let module = state
        .attack
        .as_ref()
        .ok_or(CoreError::Contract("dissection needs an attack module"))?;
    let flat = module.flat_values();
    let (core, _) = partition_core_periphery(&flat, NEAR_ZERO_TAU, CORE_QUANTILE)?;
    Ok(DissectionReport {
        full: dissect_keep(state, KeepSet::Full, trigger, target_class, images, labels)?,
        core_only: dissect_keep(state, KeepSet::Core, trigger, target_class, images, labels)?,
        periphery_only: dissect_keep(
            state,
            KeepSet::Periphery,
            trigger,
            target_class,
            images,
            labels,
        )?,
        core_fraction: core.len() as f64 / flat.len() as f64,
    })
}

const PERTURB_BATCH: usize = 4;
const PERTURB_LR: f64 = 2e-2;

/// The functional disentanglement test: fine-tune the attack parameters only
/// (backbone and trigger fixed) on trigger-stamped training images with
/// uniformly random labels, drawn once from the seed. Returns metrics before
/// and after; the input model is untouched.
pub fn perturbative_finetune_test(
    state: &ModelState,
    ds: &SyntheticDataset,
    target_class: usize,
    epochs: usize,
    seed: u64,
) -> Result<(MetricsReport, MetricsReport)> {
    let trigger = state
        .trigger
        .as_ref()
        .ok_or(CoreError::Contract("perturbative test needs a trained trigger"))?
        .clone();
    if state.attack.is_none() {
        return Err(CoreError::Contract("perturbative test needs an attack module"));
    }
    let before = evaluate(
        state,
        Some(&trigger),
        Some(target_class),
        &ds.test_images,
        &ds.test_labels,
    )?;
    let mut copy = state.clone();
    let k = state.config.classes;
    let mut rng = Rng64::stream(seed, &[0x70657274]);
    let random_labels: Vec<usize> = (0..ds.train_images.len()).map(|_| rng.below(k)).collect();
    let poisoned: Vec<Tensor> = ds
        .train_images
        .iter()
        .map(|x| apply_trigger_tensor(x, &trigger.delta.value))
        .collect::<Result<_>>()?;
    let mut adam: Vec<AdamState> = copy
        .attack
        .as_ref()
        .unwrap()
        .params()
        .iter()
        .map(|p| AdamState::new(p.numel()))
        .collect();
    let n = poisoned.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        let mut shuffle_rng = Rng64::stream(seed, &[0x70736866, epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(PERTURB_BATCH) {
            let grads = attack_grads_on_batch(&copy, &poisoned, &random_labels, batch)?;
            let module = copy.attack.as_mut().unwrap();
            for ((p, g), st) in module
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(adam.iter_mut())
            {
                p.set_grad(g);
                adaptive_step(p, PERTURB_LR, st)?;
            }
        }
    }
    let after = evaluate(
        &copy,
        Some(&trigger),
        Some(target_class),
        &ds.test_images,
        &ds.test_labels,
    )?;
    Ok((before, after))
}

fn attack_grads_on_batch(
    state: &ModelState,
    images: &[Tensor],
    labels: &[usize],
    batch: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let module = state.attack.as_ref().unwrap();
    let mut tape = Tape::new();
    let bb = state.backbone.bind(&mut tape);
    let bound = crate::attack::bind_attack(&mut tape, module);
    let mut rows = Vec::with_capacity(batch.len());
    let mut batch_labels = Vec::with_capacity(batch.len());
    for &idx in batch {
        let img = tape.leaf_tensor(&images[idx]);
        let trace =
            crate::attack::forward_bound(&mut tape, &state.config, &bb, Some(&bound), img)?;
        rows.push(trace.logits);
        batch_labels.push(labels[idx]);
    }
    let stacked = tape.concat_rows(&rows)?;
    let loss = tape.cross_entropy_mean(stacked, &batch_labels)?;
    tape.backward(loss)?;
    Ok(bound
        .param_nodes()
        .into_iter()
        .map(|id| tape.grad(id).to_vec())
        .collect())
}

/// (ratio, acc, asr) rows for increasing global magnitude-pruning ratios
/// over the attack module only.
#[derive(Debug, Clone)]
pub struct PruneCurve {
    pub rows: Vec<(f64, f64, f64)>,
}

pub fn prune_sweep(
    state: &ModelState,
    ratios: &[f64],
    trigger: &Trigger,
    target_class: usize,
    images: &[Tensor],
    labels: &[usize],
) -> Result<PruneCurve> {
    let module = state
        .attack
        .as_ref()
        .ok_or(CoreError::Contract("prune sweep needs an attack module"))?;
    for pair in ratios.windows(2) {
        if pair[0] >= pair[1] {
            return Err(CoreError::Contract("prune ratios must be strictly increasing"));
        }
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(CoreError::Contract("prune ratios must lie in [0, 1]"));
    }
    let flat = module.flat_values();
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let masked = prune_smallest(&flat, ratio);
        let mut copy = state.clone();
        copy.attack.as_mut().unwrap().set_flat(&masked)?;
        let metrics = evaluate(&copy, Some(trigger), Some(target_class), images, labels)?;
        rows.push((ratio, metrics.acc, metrics.asr));
    }
    Ok(PruneCurve { rows })
}

/// Zeroes the floor(ratio * n) smallest-magnitude entries, ties broken by
/// ascending flat index.
pub fn prune_smallest(flat: &[f32], ratio: f64) -> Vec<f32> {
    let n = flat.len();
    let kill = (libm::floor(ratio * n as f64) as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        flat[i]
            .abs()
            .partial_cmp(&flat[j].abs())
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut out = flat.to_vec();
    for &i in &order[..kill] {
        out[i] = 0.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Backbone,
    AttackModule,
}

/// Exact parameter count in scope.
pub fn count_parameters(state: &ModelState, scope: ParamScope) -> usize {
    match scope {
        ParamScope::Backbone => state.backbone.param_count(),
        ParamScope::AttackModule => state.attack.as_ref().map_or(0, |m| m.param_count()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_hand_counts() {
        let report = weight_sparsity_stats(&[1e-7, 0.5, -0.3, 1e-8], 1e-6).unwrap();
        assert_eq!(report.near_zero, 2);
        assert_eq!(report.active, 2);
        assert!((report.near_zero_fraction - 0.5).abs() < 1e-12);
        let all_zero = weight_sparsity_stats(&[0.0; 7], 1e-6).unwrap();
        assert!((all_zero.near_zero_fraction - 1.0).abs() < 1e-12);
        assert!(weight_sparsity_stats(&[], 1e-6).is_err());
    }

    #[test]
    fn sparsity_constructed_fraction() {
        // 9449 of 10000 entries below tau -> fraction 0.9449 exactly
        let mut v = vec![0.0f32; 10_000];
        for x in v.iter_mut().take(10_000 - 9449) {
            *x = 0.25;
        }
        let report = weight_sparsity_stats(&v, 1e-6).unwrap();
        assert!((report.near_zero_fraction - 0.9449).abs() < 1e-12);
        assert!(
            (report.near_zero_fraction + report.active_fraction - 1.0).abs() < 1e-12
        );
    }

    #[test]
    fn partition_picks_exact_top_quantile() {
        let mut rng = Rng64::new(3);
        let v: Vec<f32> = (0..100).map(|_| rng.normal() as f32 + 2.0).collect();
        let (core, periphery) = partition_core_periphery(&v, 1e-6, 0.05).unwrap();
        assert_eq!(core.len(), 5);
        assert_eq!(periphery.len(), 95);
        // the core holds the largest magnitudes: full-sort oracle
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&i, &j| v[j].abs().partial_cmp(&v[i].abs()).unwrap().then(i.cmp(&j)));
        let mut oracle: Vec<usize> = order[..5].to_vec();
        oracle.sort_unstable();
        assert_eq!(core, oracle);
    }

    #[test]
    fn partition_tie_break_is_by_index() {
        let v = vec![0.5f32; 40];
        let (core, _) = partition_core_periphery(&v, 1e-6, 0.05).unwrap();
        assert_eq!(core, vec![0, 1]); // floor(40*0.05 + 0.5) = 2, first by index
    }

    #[test]
    fn partition_rejects_all_near_zero() {
        assert!(partition_core_periphery(&[1e-9, -1e-8], 1e-6, 0.05).is_err());
    }

    #[test]
    fn partition_conservation() {
        // zeroing core, then periphery, then near-zeros leaves nothing
        let mut rng = Rng64::new(4);
        let mut v: Vec<f32> = (0..60).map(|_| rng.normal() as f32).collect();
        for i in 0..10 {
            v[i * 6] = 1e-9;
        }
        let (core, periphery) = partition_core_periphery(&v, 1e-6, 0.05).unwrap();
        let mut masked = v.clone();
        for &i in core.iter().chain(&periphery) {
            masked[i] = 0.0;
        }
        for (i, &x) in masked.iter().enumerate() {
            assert!(
                (x.abs() as f64) < 1e-6,
                "index {i} survived all three sets: {x}"
            );
        }
    }

    #[test]
    fn prune_counts_are_exact_and_monotone() {
        let mut rng = Rng64::new(5);
        let v: Vec<f32> = (0..83).map(|_| rng.normal() as f32).collect();
        let mut last_nonzero = usize::MAX;
        for r in [0.0, 0.1, 0.25, 0.5, 0.9, 1.0] {
            let masked = prune_smallest(&v, r);
            let zeroed = masked.iter().filter(|&&x| x == 0.0).count();
            assert_eq!(zeroed, libm::floor(r * 83.0) as usize);
            let nonzero = masked.len() - zeroed;
            assert!(nonzero <= last_nonzero);
            last_nonzero = nonzero;
        }
        // ratio 0 is the identity
        assert_eq!(prune_smallest(&v, 0.0), v);
    }
}
