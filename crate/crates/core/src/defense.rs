//! Defender-side procedures: mask/pattern trigger reversal with L1 pressure,
//! median/MAD anomaly scoring of the recovered masks, and a feature-space
//! proximity metric that quantifies how thoroughly poisoned features merge
//! with the target class manifold.
//!
//! The reversal sees only the model's forward/backward behavior: it takes the
//! model and a clean evaluation batch, never the true trigger.

use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::attack::{apply_trigger_tensor, bind_attack, forward_bound, ModelState, Trigger};
use crate::autodiff::{adaptive_step, AdamState, Parameter, Tape, Tensor};
use crate::error::CoreError;
use crate::Result;

const REVERSAL_LR: f64 = 0.1;
const MASK_RAW_INIT: f32 = -3.0;

/// A mask/pattern pair recovered by optimization, with the mask's L1 norm.
#[derive(Debug, Clone)]
pub struct ReversedTrigger {
    /// Per-pixel blend mask in [0, 1], shape [side, side].
    pub mask: Tensor,
    /// Replacement pattern in [0, 1], shape [side, side, channels].
    pub pattern: Tensor,
    pub l1: f64,
    pub target: usize,
}

/// Optimizes a sigmoid-parameterized mask and pattern so that the blended
/// input `(1-m) x + m pattern` is classified as `target`, under an L1 penalty
/// on the mask. Non-convergence is informative (large L1), not an error.
pub fn reverse_trigger(
    state: &ModelState,
    target: usize,
    steps: usize,
    lambda_l1: f64,
    batch: &[Tensor],
) -> Result<ReversedTrigger> {
    if steps == 0 {
        return Err(CoreError::Contract("reversal needs at least one step"));
    }
    if batch.is_empty() {
        return Err(CoreError::Contract("reversal needs a clean evaluation batch"));
    }
    if target >= state.config.classes {
        return Err(CoreError::IndexOutOfRange {
            context: "reversal target class",
            index: target,
            bound: state.config.classes,
        });
    }
    let side = state.config.image;
    let channels = state.config.channels;
    let mut mask_raw = Parameter::new(
        "nc_mask_raw",
        Tensor::filled(&[side, side], MASK_RAW_INIT),
        true,
    );
    let mut pattern_raw = Parameter::new(
        "nc_pattern_raw",
        Tensor::zeros(&[side, side, channels]),
        true,
    );
    let mut adam_mask = AdamState::for_param(&mask_raw);
    let mut adam_pattern = AdamState::for_param(&pattern_raw);
    let labels = vec![target; batch.len()];
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bb = state.backbone.bind(&mut tape);
        let bound = state.attack.as_ref().map(|m| bind_attack(&mut tape, m));
        let mask_node = tape.leaf_tensor(&mask_raw.value);
        let pattern_node = tape.leaf_tensor(&pattern_raw.value);
        let mask = tape.sigmoid(mask_node);
        let mask_rep = tape.repeat_interleave(mask, channels);
        let pattern = tape.sigmoid(pattern_node);
        let mut rows = Vec::with_capacity(batch.len());
        for img in batch {
            let x = tape.leaf_tensor(img);
            let diff = tape.sub(pattern, x)?;
            let masked = tape.mul_elem(mask_rep, diff)?;
            let blended = tape.add(x, masked)?;
            let trace = forward_bound(&mut tape, &state.config, &bb, bound.as_ref(), blended)?;
            rows.push(trace.logits);
        }
        let stacked = tape.concat_rows(&rows)?;
        let ce = tape.cross_entropy_mean(stacked, &labels)?;
        let l1 = tape.sum_all(mask);
        let penalty = tape.scale(l1, lambda_l1);
        let loss = tape.add(ce, penalty)?;
        tape.backward(loss)?;
        mask_raw.set_grad(tape.grad(mask_node));
        pattern_raw.set_grad(tape.grad(pattern_node));
        adaptive_step(&mut mask_raw, REVERSAL_LR, &mut adam_mask)?;
        adaptive_step(&mut pattern_raw, REVERSAL_LR, &mut adam_pattern)?;
    }
    let mask = sigmoid_tensor(&mask_raw.value);
    let pattern = sigmoid_tensor(&pattern_raw.value);
    let l1 = mask.data().iter().map(|&m| m as f64).sum();
    Ok(ReversedTrigger {
        mask,
        pattern,
        l1,
        target,
    })
}

fn sigmoid_tensor(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        let x = *v as f64;
        *v = (1.0 / (1.0 + libm::exp(-x))) as f32;
    }
    out
}

/// Blend rule used by the reversal: x' = (1 - m) x + m pattern, the mask
/// shared across channels.
pub fn stamp_blend(image: &Tensor, reversed: &ReversedTrigger) -> Result<Tensor> {
    let channels = image.numel() / reversed.mask.numel();
    if reversed.mask.numel() * channels != image.numel()
        || reversed.pattern.numel() != image.numel()
    {
        return Err(CoreError::ShapeMismatch {
            context: "blend mask vs image extents",
            left: reversed.mask.shape().to_vec(),
            right: image.shape().to_vec(),
        });
    }
    let mut out = image.clone();
    let mask = reversed.mask.data();
    let pattern = reversed.pattern.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = mask[i / channels];
        *v = (1.0 - m) * *v + m * pattern[i];
    }
    Ok(out)
}

/// Fraction of blended non-target inputs classified as the reversal target.
pub fn blend_asr(
    state: &ModelState,
    reversed: &ReversedTrigger,
    images: &[Tensor],
    labels: &[usize],
) -> Result<f64> {
    let keep: Vec<usize> = (0..images.len())
        .filter(|&i| labels[i] != reversed.target)
        .collect();
    if keep.is_empty() {
        return Err(CoreError::Contract(
            "blend success rate undefined: every sample has the target ground truth",
        ));
    }
    let stamped: Vec<Tensor> = keep
        .iter()
        .map(|&i| stamp_blend(&images[i], reversed))
        .collect::<Result<_>>()?;
    let logits = state.logits_for(&stamped)?;
    let hits = logits
        .iter()
        .filter(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                == Some(reversed.target)
        })
        .count();
    Ok(hits as f64 / keep.len() as f64)
}

/// Per-class anomaly indices over reversed-trigger L1 norms.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub l1: Vec<f64>,
    pub index: Vec<f64>,
    pub flagged: Vec<usize>,
}

const MAD_SCALE: f64 = 1.4826;
const MAD_FLOOR: f64 = 1e-9;
const FLAG_THRESHOLD: f64 = 2.0;

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// index_c = |l1_c - median| / (1.4826 * MAD + 1e-9); classes with index > 2
/// are flagged.
pub fn anomaly_index(l1: &[f64]) -> Result<AnomalyReport> {
    if l1.len() < 3 {
        return Err(CoreError::Contract("anomaly index needs at least 3 classes"));
    }
    let mut sorted = l1.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut devs: Vec<f64> = l1.iter().map(|&x| (x - med).abs()).collect();
    let mut dev_sorted = devs.clone();
    dev_sorted.sort_by(f64::total_cmp);
    let mad = median(&dev_sorted);
    let denom = MAD_SCALE * mad + MAD_FLOOR;
    for (d, &x) in devs.iter_mut().zip(l1) {
        *d = (x - med).abs() / denom;
    }
    let flagged = (0..l1.len()).filter(|&i| devs[i] > FLAG_THRESHOLD).collect();
    Ok(AnomalyReport {
        l1: l1.to_vec(),
        index: devs,
        flagged,
    })
}

/// Proximity of poisoned features to the target-class manifold, per class.
#[derive(Debug, Clone)]
pub struct ClassProximity {
    pub class: usize,
    pub n: usize,
    pub mean_ratio: f64,
    pub fraction_below_one: f64,
}

#[derive(Debug, Clone)]
pub struct ProximityReport {
    pub per_class: Vec<ClassProximity>,
    /// Fraction of poisoned non-target samples closer to the target centroid
    /// than to their own class centroid.
    pub overall_nontarget_fraction: f64,
    /// Classes skipped for having fewer than 2 clean samples.
    pub skipped: Vec<usize>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    sqrt(
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>(),
    )
}

/// For every poisoned sample, r = dist(feature, target centroid) /
/// dist(feature, own-class centroid), with centroids taken over clean
/// features. r < 1 means the poisoned feature sits in target territory.
pub fn feature_proximity(
    state: &ModelState,
    trigger: &Trigger,
    target: usize,
    images: &[Tensor],
    labels: &[usize],
) -> Result<ProximityReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CoreError::Contract(
            "proximity needs a nonempty test set with matching labels",
        ));
    }
    let k = state.config.classes;
    if target >= k {
        return Err(CoreError::IndexOutOfRange {
            context: "proximity target class",
            index: target,
            bound: k,
        });
    }
    let clean_features = state.features_for(images)?;
    let dim = clean_features[0].len();
    let mut centroids: Vec<Option<Vec<f64>>> = vec![None; k];
    let mut skipped = Vec::new();
    for class in 0..k {
        let members: Vec<&Vec<f64>> = clean_features
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == class)
            .map(|(f, _)| f)
            .collect();
        if members.len() < 2 {
            skipped.push(class);
            continue;
        }
        let mut c = vec![0.0f64; dim];
        for f in &members {
            for (ci, &fi) in c.iter_mut().zip(f.iter()) {
                *ci += fi;
            }
        }
        c.iter_mut().for_each(|x| *x /= members.len() as f64);
        centroids[class] = Some(c);
    }
    let target_centroid = centroids[target]
        .clone()
        .ok_or(CoreError::Contract("target class has fewer than 2 clean samples"))?;
    let poisoned: Vec<Tensor> = images
        .iter()
        .map(|x| apply_trigger_tensor(x, &trigger.delta.value))
        .collect::<Result<_>>()?;
    let poisoned_features = state.features_for(&poisoned)?;
    let mut per_class = Vec::new();
    let mut nontarget_below = 0usize;
    let mut nontarget_total = 0usize;
    for class in 0..k {
        let own = match &centroids[class] {
            Some(c) => c,
            None => continue,
        };
        let mut ratios = Vec::new();
        for (f, &y) in poisoned_features.iter().zip(labels) {
            if y != class {
                continue;
            }
            let d_target = distance(f, &target_centroid);
            let d_own = distance(f, own);
            let r = if d_own > 0.0 { d_target / d_own } else { 1.0 };
            ratios.push(r);
        }
        if ratios.is_empty() {
            continue;
        }
        let below = ratios.iter().filter(|&&r| r < 1.0).count();
        if class != target {
            nontarget_below += below;
            nontarget_total += ratios.len();
        }
        per_class.push(ClassProximity {
            class,
            n: ratios.len(),
            mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
            fraction_below_one: below as f64 / ratios.len() as f64,
        });
    }
    if nontarget_total == 0 {
        return Err(CoreError::Contract(
            "proximity needs at least one non-target class with a centroid",
        ));
    }
    Ok(ProximityReport {
        per_class,
        overall_nontarget_fraction: nontarget_below as f64 / nontarget_total as f64,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anomaly_all_equal_norms() {
        let report = anomaly_index(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!(report.index.iter().all(|&i| i == 0.0));
        assert!(report.flagged.is_empty());
    }

    #[test]
    fn anomaly_hand_computed_outlier() {
        let report = anomaly_index(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        // median 3, MAD 1 -> index of 100 = 97/1.4826
        let want = 97.0 / MAD_SCALE;
        assert!((report.index[4] - want).abs() < 1e-6, "{}", report.index[4]);
        assert!((report.index[4] - 65.43).abs() < 0.01);
        assert_eq!(report.flagged, vec![4]);
    }

    #[test]
    fn anomaly_degenerate_mad_uses_floor() {
        let report = anomaly_index(&[10.0, 10.0, 10.0, 10.0, 5.0]).unwrap();
        assert_eq!(report.flagged, vec![4]);
        for i in 0..4 {
            assert_eq!(report.index[i], 0.0);
        }
        assert!(report.index[4].is_finite());
        assert!(report.index[4] > FLAG_THRESHOLD);
    }

    #[test]
    fn anomaly_indices_are_scale_invariant() {
        let base = [5.0, 7.0, 6.0, 30.0, 6.5];
        let a = anomaly_index(&base).unwrap();
        let scaled: Vec<f64> = base.iter().map(|x| x * 137.0).collect();
        let b = anomaly_index(&scaled).unwrap();
        for (x, y) in a.index.iter().zip(&b.index) {
            // the 1e-9 floor breaks exact invariance only at MAD ~ 0
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
        assert_eq!(a.flagged, b.flagged);
    }

    #[test]
    fn anomaly_requires_three_classes() {
        assert!(anomaly_index(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn blend_stays_in_bounds_and_matches_formula() {
        let mut rng = crate::rng::Rng64::new(8);
        let mut img = Tensor::zeros(&[4, 4, 1]);
        for v in img.data_mut() {
            *v = rng.next_f64() as f32;
        }
        let mut mask = Tensor::zeros(&[4, 4]);
        let mut pattern = Tensor::zeros(&[4, 4, 1]);
        for v in mask.data_mut() {
            *v = rng.next_f64() as f32;
        }
        for v in pattern.data_mut() {
            *v = rng.next_f64() as f32;
        }
        let reversed = ReversedTrigger {
            mask: mask.clone(),
            pattern: pattern.clone(),
            l1: mask.data().iter().map(|&m| m as f64).sum(),
            target: 0,
        };
        let out = stamp_blend(&img, &reversed).unwrap();
        for i in 0..16 {
            let m = mask.data()[i];
            let want = (1.0 - m) * img.data()[i] + m * pattern.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-7);
            assert!((0.0..=1.0).contains(&out.data()[i]));
        }
    }
}
