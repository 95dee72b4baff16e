//! Clean backbone pretraining and joint alternating optimization of the
//! attack module and trigger under a frozen backbone.
//!
//! Per batch: an adaptive-moment step on the attack parameters against the
//! total loss with the trigger fixed, then a signed projected step on the
//! trigger against the attack loss with the attack parameters fixed.
//! Poisoning is on-the-fly: every clean batch is reused as its own poisoned
//! batch in the same step, and the poisoned images are never materialized in
//! the dataset.

use alloc::vec;
use alloc::vec::Vec;

use crate::attack::{apply_trigger, bind_attack, AttackKind, ModelState, Trigger};
use crate::autodiff::{adaptive_step, AdamState, Tape, Tensor};
use crate::data::SyntheticDataset;
use crate::error::CoreError;
use crate::rng::Rng64;
use crate::Result;

/// Hyperparameters for both the clean pretraining phase and the joint attack
/// phase.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_phi: f64,
    pub lr_delta: f64,
    pub epsilon: f64,
    pub target_class: usize,
    pub kind: AttackKind,
    pub seed: u64,
    /// Proximal L1 shrinkage coefficient for the dynamic generator
    /// (per-step threshold `lr_phi * l1_phi`); the static and low-rank
    /// baselines train without shrinkage, matching their standard recipes.
    pub l1_phi: f64,
    pub clean_epochs: usize,
    pub clean_lr: f64,
}

impl TrainConfig {
    pub fn toy(kind: AttackKind, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch: 16,
            lr_phi: 2e-3,
            lr_delta: 1e-2,
            epsilon: 4.0 / 255.0,
            target_class: 0,
            kind,
            seed,
            l1_phi: 0.5,
            clean_epochs: 40,
            clean_lr: 1e-3,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.target_class >= classes {
            return Err(CoreError::IndexOutOfRange {
                context: "target class",
                index: self.target_class,
                bound: classes,
            });
        }
        if self.lr_phi <= 0.0 || self.lr_delta <= 0.0 || self.epsilon <= 0.0 {
            return Err(CoreError::Contract(
                "learning rates and trigger radius must be positive",
            ));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(CoreError::Contract("batch size and epochs must be >= 1"));
        }
        if self.l1_phi < 0.0 {
            return Err(CoreError::Contract("l1 coefficient must be >= 0"));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_clean: f64,
    pub l_attack: f64,
    pub l_total: f64,
    pub delta_linf: f64,
}

/// Per-step loss log plus epoch means.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub steps: Vec<StepRecord>,
    /// (epoch, mean clean, mean attack, mean total)
    pub epoch_means: Vec<(usize, f64, f64, f64)>,
}

impl LossReport {
    fn summarize(&mut self, epochs: usize) {
        for e in 0..epochs {
            let rows: Vec<&StepRecord> = self.steps.iter().filter(|s| s.epoch == e).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            self.epoch_means.push((
                e,
                rows.iter().map(|s| s.l_clean).sum::<f64>() / n,
                rows.iter().map(|s| s.l_attack).sum::<f64>() / n,
                rows.iter().map(|s| s.l_total).sum::<f64>() / n,
            ));
        }
    }
}

/// Exact sum of the two competing losses.
pub fn total_loss(l_clean: f64, l_attack: f64) -> f64 {
    l_clean + l_attack
}

fn mean_ce_from_logits(logits: &[Vec<f64>], label_of: impl Fn(usize) -> usize) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let label = label_of(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| libm::exp(x - max)).sum();
        total -= row[label] - max - libm::log(sum);
    }
    total / logits.len() as f64
}

/// Mean cross-entropy of the model on a clean batch.
pub fn clean_loss(state: &ModelState, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CoreError::Contract(
            "clean loss needs a nonempty batch with matching labels",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= state.config.classes) {
        return Err(CoreError::IndexOutOfRange {
            context: "clean loss label",
            index: bad,
            bound: state.config.classes,
        });
    }
    let logits = state.logits_for(images)?;
    Ok(mean_ce_from_logits(&logits, |i| labels[i]))
}

/// Mean cross-entropy toward the constant target on trigger-stamped inputs;
/// the trigger is applied per call and never stored in the dataset.
pub fn attack_loss(
    state: &ModelState,
    images: &[Tensor],
    trigger: &Trigger,
    target_class: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(CoreError::Contract("attack loss needs a nonempty batch"));
    }
    if target_class >= state.config.classes {
        return Err(CoreError::IndexOutOfRange {
            context: "attack loss target",
            index: target_class,
            bound: state.config.classes,
        });
    }
    let poisoned: Vec<Tensor> = images
        .iter()
        .map(|x| crate::attack::apply_trigger_tensor(x, &trigger.delta.value))
        .collect::<Result<_>>()?;
    let logits = state.logits_for(&poisoned)?;
    Ok(mean_ce_from_logits(&logits, |_| target_class))
}

/// Trains every backbone parameter on clean data, freezes the backbone, and
/// returns the reference clean accuracy on the test split.
pub fn train_clean_baseline(
    state: &mut ModelState,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate(state.config.classes)?;
    if state.backbone.frozen {
        return Err(CoreError::Contract(
            "baseline training requires a fresh, unfrozen backbone",
        ));
    }
    let mut adam: Vec<AdamState> = state
        .backbone
        .params()
        .iter()
        .map(|p| AdamState::new(p.numel()))
        .collect();
    let n = ds.train_images.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.clean_epochs {
        let mut rng = Rng64::stream(cfg.seed, &[0x636c6e, epoch as u64]);
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch) {
            let grads = backbone_batch_grads(state, ds, batch)?;
            for ((p, g), st) in state
                .backbone
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(adam.iter_mut())
            {
                p.set_grad(g);
                adaptive_step(p, cfg.clean_lr, st)?;
            }
        }
    }
    state.backbone.freeze();
    let report = crate::analysis::evaluate(state, None, None, &ds.test_images, &ds.test_labels)?;
    Ok(report.acc)
}

fn backbone_batch_grads(
    state: &ModelState,
    ds: &SyntheticDataset,
    batch: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bb = state.backbone.bind(&mut tape);
    let mut rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &idx in batch {
        let img = tape.leaf_tensor(&ds.train_images[idx]);
        let trace =
            crate::vit::forward_trace(&mut tape, &state.config, &bb, &[], img, |_, _, s| Ok(s))?;
        rows.push(trace.logits);
        labels.push(ds.train_labels[idx]);
    }
    let stacked = tape.concat_rows(&rows)?;
    let loss = tape.cross_entropy_mean(stacked, &labels)?;
    tape.backward(loss)?;
    let ids = [bb.patch_w, bb.patch_b, bb.pos, bb.cls]
        .into_iter()
        .chain(bb.layers.iter().flat_map(|l| {
            [
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.ln2_g,
                l.ln2_b, l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2,
            ]
        }))
        .chain([bb.final_ln_g, bb.final_ln_b, bb.head_w]);
    Ok(ids.map(|id| tape.grad(id).to_vec()).collect())
}

/// Joint alternating optimization; the backbone must already be pretrained
/// and frozen. Returns the per-step loss log.
pub fn train_joint(
    state: &mut ModelState,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate(state.config.classes)?;
    if !state.backbone.frozen {
        return Err(CoreError::Contract(
            "joint training requires a frozen backbone",
        ));
    }
    if state.attack.is_none() {
        return Err(CoreError::Contract(
            "joint training requires an attack module",
        ));
    }
    if state.trigger.is_none() {
        state.trigger = Some(Trigger::init(&state.config, cfg.epsilon, cfg.seed)?);
    } else if let Some(t) = state.trigger.as_mut() {
        t.epsilon = cfg.epsilon;
        crate::attack::project_trigger(t)?;
    }
    let shrink = match cfg.kind {
        AttackKind::Dynamic => cfg.lr_phi * cfg.l1_phi,
        _ => 0.0,
    };
    let mut adam: Vec<AdamState> = state
        .attack
        .as_ref()
        .unwrap()
        .params()
        .iter()
        .map(|p| AdamState::new(p.numel()))
        .collect();
    let mut report = LossReport::default();
    let n = ds.train_images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = Rng64::stream(cfg.seed, &[0x73687566, epoch as u64]);
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch) {
            // step A: adaptive step on the attack parameters against L_total
            let (l_clean, l_attack, phi_grads) = joint_losses_and_grads(state, ds, batch, cfg)?;
            {
                let module = state.attack.as_mut().unwrap();
                for ((p, g), st) in module
                    .params_mut()
                    .into_iter()
                    .zip(&phi_grads)
                    .zip(adam.iter_mut())
                {
                    p.set_grad(g);
                    adaptive_step(p, cfg.lr_phi, st)?;
                }
                if shrink > 0.0 {
                    for p in module.params_mut() {
                        soft_threshold(p.value.data_mut(), shrink as f32);
                    }
                }
            }
            // step B: signed projected step on the trigger against L_attack
            let delta_grad = attack_grad_wrt_trigger(state, ds, batch, cfg.target_class)?;
            let linf = {
                let trigger = state.trigger.as_mut().unwrap();
                let data = trigger.delta.value.data_mut();
                for (v, g) in data.iter_mut().zip(&delta_grad) {
                    let sign = if *g > 0.0 {
                        1.0
                    } else if *g < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *v -= (cfg.lr_delta * sign) as f32;
                }
                crate::attack::project_trigger(trigger)?;
                let linf = trigger.linf();
                debug_assert!(linf <= trigger.epsilon + 1e-7);
                linf
            };
            report.steps.push(StepRecord {
                step,
                epoch,
                l_clean,
                l_attack,
                l_total: total_loss(l_clean, l_attack),
                delta_linf: linf,
            });
            step += 1;
        }
    }
    report.summarize(cfg.epochs);
    Ok(report)
}

/// Soft-thresholding: the proximal operator of the L1 penalty. Weights whose
/// gradient signal cannot sustain the threshold decay to exact zero.
pub fn soft_threshold(values: &mut [f32], tau: f32) {
    for v in values.iter_mut() {
        let a = v.abs() - tau;
        *v = if a <= 0.0 { 0.0 } else { a.copysign(*v) };
    }
}

/// Forward both the clean batch and its on-the-fly poisoned twin on one tape,
/// backward from the total loss, and return per-parameter attack gradients.
fn joint_losses_and_grads(
    state: &ModelState,
    ds: &SyntheticDataset,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let module = state.attack.as_ref().unwrap();
    let trigger = state.trigger.as_ref().unwrap();
    let mut tape = Tape::new();
    let bb = state.backbone.bind(&mut tape);
    let bound = bind_attack(&mut tape, module);
    let delta_node = tape.leaf_tensor(&trigger.delta.value);
    let mut clean_rows = Vec::with_capacity(batch.len());
    let mut poison_rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &idx in batch {
        let img = tape.leaf_tensor(&ds.train_images[idx]);
        let clean =
            crate::attack::forward_bound(&mut tape, &state.config, &bb, Some(&bound), img)?;
        clean_rows.push(clean.logits);
        labels.push(ds.train_labels[idx]);
        let stamped = apply_trigger(&mut tape, img, delta_node)?;
        let poisoned =
            crate::attack::forward_bound(&mut tape, &state.config, &bb, Some(&bound), stamped)?;
        poison_rows.push(poisoned.logits);
    }
    let clean_stack = tape.concat_rows(&clean_rows)?;
    let l_clean_node = tape.cross_entropy_mean(clean_stack, &labels)?;
    let poison_stack = tape.concat_rows(&poison_rows)?;
    let target_labels = vec![cfg.target_class; batch.len()];
    let l_attack_node = tape.cross_entropy_mean(poison_stack, &target_labels)?;
    let total = tape.add(l_clean_node, l_attack_node)?;
    tape.backward(total)?;
    let grads = bound
        .param_nodes()
        .into_iter()
        .map(|id| tape.grad(id).to_vec())
        .collect();
    Ok((tape.scalar(l_clean_node), tape.scalar(l_attack_node), grads))
}

/// Gradient of the attack loss with respect to the trigger, with the just
/// updated attack parameters held fixed.
fn attack_grad_wrt_trigger(
    state: &ModelState,
    ds: &SyntheticDataset,
    batch: &[usize],
    target_class: usize,
) -> Result<Vec<f64>> {
    let module = state.attack.as_ref().unwrap();
    let trigger = state.trigger.as_ref().unwrap();
    let mut tape = Tape::new();
    let bb = state.backbone.bind(&mut tape);
    let bound = bind_attack(&mut tape, module);
    let delta_node = tape.leaf_tensor(&trigger.delta.value);
    let mut rows = Vec::with_capacity(batch.len());
    for &idx in batch {
        let img = tape.leaf_tensor(&ds.train_images[idx]);
        let stamped = apply_trigger(&mut tape, img, delta_node)?;
        let trace =
            crate::attack::forward_bound(&mut tape, &state.config, &bb, Some(&bound), stamped)?;
        rows.push(trace.logits);
    }
    let stacked = tape.concat_rows(&rows)?;
    let labels = vec![target_class; batch.len()];
    let loss = tape.cross_entropy_mean(stacked, &labels)?;
    tape.backward(loss)?;
    Ok(tape.grad(delta_node).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackModule, StaticPrompts, VpgParams};
    use crate::data::{generate_dataset, SyntheticDatasetSpec};
    use crate::vit::ViTConfig;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::toy(AttackKind::Dynamic, 5);
        cfg.epochs = 16;
        cfg.batch = 8;
        cfg.clean_epochs = 30;
        cfg.epsilon = 8.0 / 255.0;
        cfg.l1_phi = 0.0;
        cfg
    }

    fn trained_tiny_baseline() -> (ModelState, crate::data::SyntheticDataset, TrainConfig) {
        let spec = SyntheticDatasetSpec::tiny_two_class(5);
        let ds = generate_dataset(&spec).unwrap();
        let mut state = ModelState::new_clean(ViTConfig::tiny_two_class(), 5).unwrap();
        let cfg = tiny_cfg();
        train_clean_baseline(&mut state, &ds, &cfg).unwrap();
        (state, ds, cfg)
    }

    #[test]
    fn total_loss_is_exact_sum() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.5, 2.5), 4.0);
        let mut rng = Rng64::new(1);
        for _ in 0..10 {
            let a = rng.normal();
            let b = rng.normal();
            assert_eq!(total_loss(a, b), a + b);
        }
    }

    #[test]
    fn clean_loss_uniform_and_saturated_models() {
        let cfg = ViTConfig::tiny_two_class();
        let mut state = ModelState::new_clean(cfg.clone(), 3).unwrap();
        // zero every parameter: logits are exactly zero -> uniform -> ln K
        for p in state.backbone.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let spec = SyntheticDatasetSpec::tiny_two_class(3);
        let ds = generate_dataset(&spec).unwrap();
        let batch: Vec<Tensor> = ds.train_images[..6].to_vec();
        let labels = vec![0usize; 6];
        let l = clean_loss(&state, &batch, &labels).unwrap();
        assert!((l - libm::log(2.0)).abs() < 1e-9, "uniform loss {l}");
        // rig the final norm shift and head so logit[0] is huge: the zeroed
        // sequence is constant, layer norm outputs beta, head reads it
        state.backbone.final_ln_b.value.data_mut()[0] = 1.0;
        state.backbone.head_w.value.data_mut()[0] = 40.0;
        let l_sat = clean_loss(&state, &batch, &labels).unwrap();
        assert!(l_sat < 1e-3, "saturated loss {l_sat}");
        // empty batch is a contract error
        assert!(clean_loss(&state, &[], &[]).is_err());
    }

    #[test]
    fn clean_loss_matches_per_sample_oracle() {
        let (state, ds, _) = trained_tiny_baseline();
        let batch: Vec<Tensor> = ds.test_images[..10].to_vec();
        let labels: Vec<usize> = ds.test_labels[..10].to_vec();
        let l = clean_loss(&state, &batch, &labels).unwrap();
        let logits = state.logits_for(&batch).unwrap();
        let mut oracle = 0.0;
        for (row, &y) in logits.iter().zip(&labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let sum: f64 = row.iter().map(|&x| libm::exp(x - max)).sum();
            oracle -= row[y] - max - libm::log(sum);
        }
        oracle /= 10.0;
        assert!((l - oracle).abs() < 1e-6);
    }

    #[test]
    fn attack_loss_with_zero_trigger_equals_clean_loss_at_target() {
        let (state, ds, _) = trained_tiny_baseline();
        let trigger = Trigger {
            delta: crate::autodiff::Parameter::new("delta", Tensor::zeros(&[16, 16, 1]), true),
            epsilon: 4.0 / 255.0,
        };
        let batch: Vec<Tensor> = ds.test_images[..8].to_vec();
        let la = attack_loss(&state, &batch, &trigger, 1).unwrap();
        let lc = clean_loss(&state, &batch, &vec![1usize; 8]).unwrap();
        assert!((la - lc).abs() < 1e-9, "attack {la} vs clean-at-target {lc}");
    }

    #[test]
    fn soft_threshold_zeroes_small_weights() {
        let mut v = vec![0.5f32, -0.05, 0.2, -0.3, 0.09];
        soft_threshold(&mut v, 0.1);
        let want = [0.4f32, 0.0, 0.1, -0.2, 0.0];
        for (got, want) in v.iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert_eq!(v[1], 0.0);
        assert_eq!(v[4], 0.0);
    }

    #[test]
    fn joint_training_on_separable_two_class_task() {
        let (mut state, ds, cfg) = trained_tiny_baseline();
        let theta_before = state.backbone.checksum();
        let baseline =
            crate::analysis::evaluate(&state, None, None, &ds.test_images, &ds.test_labels)
                .unwrap();
        assert!(baseline.acc >= 0.95, "baseline acc {}", baseline.acc);

        state.attack = Some(AttackModule::Dynamic(
            VpgParams::init(&state.config, vec![1, 2], 4, cfg.seed).unwrap(),
        ));
        let report = train_joint(&mut state, &ds, &cfg).unwrap();
        // frozen contract and trigger feasibility at every step
        assert_eq!(state.backbone.checksum(), theta_before);
        for s in &report.steps {
            assert!(s.delta_linf <= cfg.epsilon + 1e-7);
            assert!((s.l_total - (s.l_clean + s.l_attack)).abs() < 1e-6);
        }
        let trigger = state.trigger.clone().unwrap();
        let metrics = crate::analysis::evaluate(
            &state,
            Some(&trigger),
            Some(cfg.target_class),
            &ds.test_images,
            &ds.test_labels,
        )
        .unwrap();
        assert!(metrics.asr >= 1.0 - 1e-12, "asr {}", metrics.asr);
        assert!(metrics.acc >= 0.95, "acc {}", metrics.acc);
    }

    #[test]
    fn joint_training_requires_frozen_backbone_and_module() {
        let spec = SyntheticDatasetSpec::tiny_two_class(6);
        let ds = generate_dataset(&spec).unwrap();
        let mut state = ModelState::new_clean(ViTConfig::tiny_two_class(), 6).unwrap();
        let cfg = tiny_cfg();
        match train_joint(&mut state, &ds, &cfg).unwrap_err() {
            CoreError::Contract(msg) => assert!(msg.contains("frozen")),
            other => panic!("unexpected error {other:?}"),
        }
        state.backbone.freeze();
        match train_joint(&mut state, &ds, &cfg).unwrap_err() {
            CoreError::Contract(msg) => assert!(msg.contains("attack module")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn baseline_accuracy_is_bit_reproducible() {
        let run = || {
            let spec = SyntheticDatasetSpec::tiny_two_class(7);
            let ds = generate_dataset(&spec).unwrap();
            let mut state = ModelState::new_clean(ViTConfig::tiny_two_class(), 7).unwrap();
            let mut cfg = tiny_cfg();
            cfg.clean_epochs = 6;
            let acc = train_clean_baseline(&mut state, &ds, &cfg).unwrap();
            (acc.to_bits(), state.backbone.checksum())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn static_backend_trains_too() {
        let (mut state, ds, mut cfg) = trained_tiny_baseline();
        cfg.kind = AttackKind::Static;
        cfg.epochs = 6;
        state.attack = Some(AttackModule::Static(
            StaticPrompts::init(&state.config, vec![1, 2], 4, cfg.seed).unwrap(),
        ));
        let report = train_joint(&mut state, &ds, &cfg).unwrap();
        assert_eq!(report.steps.len(), 6 * 4); // 32 samples, batch 8
        let last = report.steps.last().unwrap();
        let first = report.steps.first().unwrap();
        assert!(last.l_total < first.l_total, "loss should decrease");
    }
}
