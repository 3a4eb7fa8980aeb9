//! Mode partition: decide which parameter positions stay dynamic.
//!
//! The signal is the gradient of the loss with respect to the relaxed
//! indicator mask (see [`crate::pad`]), averaged over a few batches. Its
//! normalized magnitudes rank positions; the top share by the current budget
//! stays dynamic, the rest become static. The iterative variant shrinks the
//! budget geometrically over several steps, re-ranking each time but only
//! ever demoting — masks are nested by construction because selection is
//! restricted to positions still dynamic.

use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::pad::IndicatorMask;
use crate::tensor::Float;

/// Number of positions a ratio keeps out of `m`: `⌈κ·m⌉`, with the product
/// snapped to the nearest integer first so binary rounding noise (for
/// example `0.1 · 1000 = 100.00000000000001`) cannot inflate the ceiling.
pub fn budget_count(kappa: f64, m: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&kappa) || kappa.is_nan() {
        return Err(PadError::InvalidArgument(format!("keep ratio must lie in [0, 1], got {kappa}")));
    }
    let t = kappa * m as f64;
    let snapped = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() };
    Ok(snapped as usize)
}

/// Normalized saliency: `s_j = |g_j| / Σ_{k active} |g_k|` on active
/// positions, exactly `0` elsewhere. If every active gradient is zero the
/// mass is spread uniformly over the active positions. Non-finite gradients
/// are rejected.
pub fn saliency(grad: &[Float], active: &IndicatorMask) -> Result<Vec<Float>> {
    if grad.len() != active.len() {
        return Err(PadError::ShapeMismatch {
            op: "saliency",
            detail: format!("gradient length {} vs mask length {}", grad.len(), active.len()),
        });
    }
    if let Some((j, _)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(PadError::InvalidArgument(format!("non-finite mask gradient at position {j}")));
    }
    let mut out = vec![0.0; grad.len()];
    let mut total = 0.0;
    for (j, &g) in grad.iter().enumerate() {
        if active.is_dynamic(j) {
            out[j] = g.abs();
            total += out[j];
        }
    }
    let active_count = active.dynamic_count();
    if active_count == 0 {
        return Ok(out);
    }
    if total == 0.0 {
        let u = 1.0 / active_count as Float;
        for (j, o) in out.iter_mut().enumerate() {
            if active.is_dynamic(j) {
                *o = u;
            }
        }
    } else {
        for o in &mut out {
            *o /= total;
        }
    }
    Ok(out)
}

/// Indices of the `count` highest-saliency active positions (ties go to the
/// lower index), in ascending index order.
pub fn select_top(scores: &[Float], active: &IndicatorMask, count: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&j| active.is_dynamic(j)).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = candidates.into_iter().take(count).collect();
    kept.sort_unstable();
    kept
}

/// One-shot threshold: rank active positions by saliency and keep the top
/// `⌈κ·m⌉` (of the total length `m`) dynamic; everything else goes static.
pub fn threshold_mask(scores: &[Float], active: &IndicatorMask, kappa: f64) -> Result<IndicatorMask> {
    if scores.len() != active.len() {
        return Err(PadError::ShapeMismatch {
            op: "threshold_mask",
            detail: format!("{} scores vs mask length {}", scores.len(), active.len()),
        });
    }
    let count = budget_count(kappa, active.len())?.min(active.dynamic_count());
    let kept = select_top(scores, active, count);
    let mut mask = IndicatorMask::zeros(active.len());
    for j in kept {
        mask.set(j, true);
    }
    Ok(mask)
}

/// Schedule for iterative partition: after step `t` of `steps`, the kept
/// ratio is `κ^(t/steps)`, reaching exactly `κ` at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub kappa: f64,
    pub steps: usize,
    /// Fresh batches whose mask gradients are averaged per step.
    pub batches_per_step: usize,
}

impl PartitionPlan {
    pub fn new(kappa: f64, steps: usize, batches_per_step: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) || kappa.is_nan() {
            return Err(PadError::InvalidArgument(format!("keep ratio must lie in [0, 1], got {kappa}")));
        }
        if steps == 0 {
            return Err(PadError::InvalidArgument("partition needs at least one step".into()));
        }
        if batches_per_step == 0 {
            return Err(PadError::InvalidArgument("partition needs at least one batch per step".into()));
        }
        Ok(PartitionPlan { kappa, steps, batches_per_step })
    }

    /// Target ratio after step `t ∈ [1, steps]`.
    pub fn ratio_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(PadError::InvalidArgument(format!("step {t} outside 1..={}", self.steps)));
        }
        if t == self.steps {
            return Ok(self.kappa);
        }
        Ok(self.kappa.powf(t as f64 / self.steps as f64))
    }
}

/// Whether the keep budget is applied to each layer separately or to the
/// concatenation of all layers (letting per-layer ratios emerge).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    #[default]
    Global,
    PerLayer,
}

/// Supplies one fresh batch worth of mask gradients per call, one gradient
/// vector per partitioned layer, in a fixed layer order.
pub trait MaskGradSource {
    fn mask_gradients(&mut self) -> Result<Vec<Vec<Float>>>;
}

/// What one partition step did to one layer.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionEvent {
    pub step: usize,
    pub layer: String,
    pub target_ratio: f64,
    pub mask_len: usize,
    pub kept: usize,
    /// Smallest saliency that still made the cut (0 when nothing was kept).
    pub threshold_saliency: f64,
}

/// Run the iterative schedule, demoting positions in place. `masks` holds
/// the current per-layer masks and `names` their labels for event records;
/// `events` receives one record per (step, layer).
pub fn run_schedule<S: MaskGradSource>(
    source: &mut S,
    masks: &mut [IndicatorMask],
    names: &[String],
    plan: &PartitionPlan,
    scope: BudgetScope,
    mut events: impl FnMut(PartitionEvent),
) -> Result<()> {
    if masks.len() != names.len() {
        return Err(PadError::ShapeMismatch {
            op: "run_schedule",
            detail: format!("{} masks vs {} names", masks.len(), names.len()),
        });
    }
    if masks.is_empty() {
        return Ok(());
    }
    for t in 1..=plan.steps {
        let ratio = plan.ratio_at(t)?;

        // Accumulate signed gradients over the step's batches, then rank by
        // magnitude of the sum (equivalent to ranking the batch mean).
        let mut acc: Vec<Vec<Float>> = Vec::new();
        for _ in 0..plan.batches_per_step {
            let grads = source.mask_gradients()?;
            if grads.len() != masks.len() {
                return Err(PadError::ShapeMismatch {
                    op: "run_schedule",
                    detail: format!("source produced {} gradient vectors for {} layers", grads.len(), masks.len()),
                });
            }
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(grads) {
                    if a.len() != g.len() {
                        return Err(PadError::ShapeMismatch {
                            op: "run_schedule",
                            detail: "mask gradient length changed between batches".into(),
                        });
                    }
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }

        match scope {
            BudgetScope::PerLayer => {
                for (l, mask) in masks.iter_mut().enumerate() {
                    let scores = saliency(&acc[l], mask)?;
                    let count = budget_count(ratio, mask.len())?.min(mask.dynamic_count());
                    let kept = select_top(&scores, mask, count);
                    let threshold = kept.iter().map(|&j| scores[j] as f64).fold(f64::INFINITY, f64::min);
                    let mut next = IndicatorMask::zeros(mask.len());
                    for &j in &kept {
                        next.set(j, true);
                    }
                    events(PartitionEvent {
                        step: t,
                        layer: names[l].clone(),
                        target_ratio: ratio,
                        mask_len: mask.len(),
                        kept: kept.len(),
                        threshold_saliency: if kept.is_empty() { 0.0 } else { threshold },
                    });
                    *mask = next;
                }
            }
            BudgetScope::Global => {
                // Joint normalization across layers: concatenate, rank once.
                let total_len: usize = masks.iter().map(IndicatorMask::len).sum();
                let mut joint_grad = Vec::with_capacity(total_len);
                let mut joint_bits = Vec::with_capacity(total_len);
                for (l, mask) in masks.iter().enumerate() {
                    joint_grad.extend_from_slice(&acc[l]);
                    joint_bits.extend_from_slice(mask.bits());
                }
                let joint_active = IndicatorMask::from_slice(&joint_bits)?;
                let scores = saliency(&joint_grad, &joint_active)?;
                let count = budget_count(ratio, total_len)?.min(joint_active.dynamic_count());
                let kept = select_top(&scores, &joint_active, count);

                let mut offset = 0;
                let mut kept_iter = kept.iter().peekable();
                for (l, mask) in masks.iter_mut().enumerate() {
                    let end = offset + mask.len();
                    let mut next = IndicatorMask::zeros(mask.len());
                    let mut layer_kept = 0usize;
                    let mut threshold = f64::INFINITY;
                    while let Some(&&j) = kept_iter.peek() {
                        if j >= end {
                            break;
                        }
                        next.set(j - offset, true);
                        layer_kept += 1;
                        threshold = threshold.min(scores[j] as f64);
                        kept_iter.next();
                    }
                    events(PartitionEvent {
                        step: t,
                        layer: names[l].clone(),
                        target_ratio: ratio,
                        mask_len: mask.len(),
                        kept: layer_kept,
                        threshold_saliency: if layer_kept == 0 { 0.0 } else { threshold },
                    });
                    *mask = next;
                    offset = end;
                }
            }
        }
    }
    Ok(())
}

/// Uniformly random keep set of size `⌈κ·m⌉` (always per layer).
pub fn random_mask(m: usize, kappa: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<IndicatorMask> {
    let count = budget_count(kappa, m)?;
    let chosen = rand::seq::index::sample(rng, m, count);
    let mut mask = IndicatorMask::zeros(m);
    for j in chosen {
        mask.set(j, true);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_count_pinned_cases() {
        assert_eq!(budget_count(0.3, 1000).unwrap(), 300);
        assert_eq!(budget_count(0.1, 1000).unwrap(), 100);
        assert_eq!(budget_count(0.5, 7).unwrap(), 4);
        assert_eq!(budget_count(1.0, 123).unwrap(), 123);
        assert_eq!(budget_count(0.0, 123).unwrap(), 0);
        assert_eq!(budget_count(0.7, 10).unwrap(), 7);
        for (kappa, want) in [(0.1, 100), (0.3, 300), (0.5, 500), (0.7, 700), (1.0, 1000)] {
            assert_eq!(budget_count(kappa, 1000).unwrap(), want);
        }
        assert!(budget_count(-0.1, 5).is_err());
        assert!(budget_count(1.2, 5).is_err());
        assert!(budget_count(f64::NAN, 5).is_err());
    }

    #[test]
    fn saliency_normalizes_magnitudes() {
        let active = IndicatorMask::ones(2);
        let s = saliency(&[-3.0, 1.0], &active).unwrap();
        assert_eq!(s, vec![0.75, 0.25]);
        let total: Float = s.iter().sum();
        assert!((total - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn saliency_is_zero_on_inactive_positions() {
        let active = IndicatorMask::from_slice(&[1, 0, 1]).unwrap();
        let s = saliency(&[2.0, 100.0, 2.0], &active).unwrap();
        assert_eq!(s, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_gradients_fall_back_to_uniform() {
        let active = IndicatorMask::from_slice(&[1, 0, 1, 1]).unwrap();
        let s = saliency(&[0.0; 4], &active).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(s, vec![third, 0.0, third, third]);
    }

    #[test]
    fn saliency_rejects_non_finite() {
        let active = IndicatorMask::ones(2);
        assert!(saliency(&[Float::NAN, 1.0], &active).is_err());
        assert!(saliency(&[Float::INFINITY, 1.0], &active).is_err());
    }

    #[test]
    fn threshold_keeps_top_half() {
        let active = IndicatorMask::ones(4);
        let mask = threshold_mask(&[0.4, 0.1, 0.3, 0.2], &active, 0.5).unwrap();
        assert_eq!(mask.bits(), &[1, 0, 1, 0]);
    }

    #[test]
    fn threshold_tie_prefers_lower_index() {
        let active = IndicatorMask::ones(4);
        let mask = threshold_mask(&[0.25, 0.25, 0.25, 0.25], &active, 0.5).unwrap();
        assert_eq!(mask.bits(), &[1, 1, 0, 0]);
    }

    #[test]
    fn ranking_is_invariant_under_gradient_scaling() {
        let g: Vec<Float> = vec![0.3, -2.1, 0.0, 1.4, -0.2, 0.9];
        let scaled: Vec<Float> = g.iter().map(|v| v * 7.3).collect();
        let active = IndicatorMask::ones(g.len());
        let a = threshold_mask(&saliency(&g, &active).unwrap(), &active, 0.5).unwrap();
        let b = threshold_mask(&saliency(&scaled, &active).unwrap(), &active, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plan_ratios_pinned() {
        let plan = PartitionPlan::new(0.3, 3, 10).unwrap();
        assert!((plan.ratio_at(1).unwrap() - 0.6694329500821695).abs() <= 1e-12);
        assert!((plan.ratio_at(2).unwrap() - 0.44814047465571647).abs() <= 1e-12);
        assert_eq!(plan.ratio_at(3).unwrap(), 0.3);
        assert!(plan.ratio_at(0).is_err());
        assert!(plan.ratio_at(4).is_err());
    }

    #[test]
    fn plan_final_step_hits_kappa_exactly() {
        for kappa in [0.1, 0.3, 0.5, 0.9] {
            for steps in [1, 2, 5] {
                let plan = PartitionPlan::new(kappa, steps, 1).unwrap();
                assert_eq!(plan.ratio_at(steps).unwrap(), kappa);
            }
        }
    }

    #[test]
    fn plan_validation() {
        assert!(PartitionPlan::new(1.5, 3, 1).is_err());
        assert!(PartitionPlan::new(0.5, 0, 1).is_err());
        assert!(PartitionPlan::new(0.5, 3, 0).is_err());
    }

    struct FixedGrads {
        grads: Vec<Vec<Float>>,
    }

    impl MaskGradSource for FixedGrads {
        fn mask_gradients(&mut self) -> Result<Vec<Vec<Float>>> {
            Ok(self.grads.clone())
        }
    }

    #[test]
    fn schedule_produces_nested_masks() {
        // The source is deterministic, and a schedule with kappa κ^(t/T) over
        // t steps traces exactly the first t steps of the full T-step
        // schedule (both hit the ratios κ^(s/T)), so running the prefixes
        // recovers each intermediate mask.
        let grads = vec![vec![0.9, -0.5, 0.1, 0.7, -0.3, 0.05, 0.6, -0.8, 0.2, 0.4]];
        let mut source = FixedGrads { grads };
        let names = vec!["layer".to_string()];
        let plan = PartitionPlan::new(0.3, 3, 2).unwrap();
        let mut step_masks: Vec<IndicatorMask> = Vec::new();
        for t in 1..=3usize {
            let mut masks_t = vec![IndicatorMask::ones(10)];
            let plan_t = PartitionPlan { kappa: plan.ratio_at(t).unwrap(), steps: t, batches_per_step: 2 };
            run_schedule(&mut source, &mut masks_t, &names, &plan_t, BudgetScope::PerLayer, |_| {}).unwrap();
            step_masks.push(masks_t.remove(0));
        }

        assert_eq!(step_masks[0].dynamic_count(), 7); // ceil(0.669⋅10)
        assert_eq!(step_masks[1].dynamic_count(), 5); // ceil(0.448⋅10)
        assert_eq!(step_masks[2].dynamic_count(), 3);
        assert!(step_masks[0].is_superset_of(&step_masks[1]));
        assert!(step_masks[1].is_superset_of(&step_masks[2]));
    }

    #[test]
    fn single_step_schedule_equals_one_shot_threshold() {
        let g = vec![0.9, -0.5, 0.1, 0.7, -0.3, 0.05, 0.6, -0.8, 0.2, 0.4];
        let mut source = FixedGrads { grads: vec![g.clone()] };
        let mut masks = vec![IndicatorMask::ones(10)];
        let plan = PartitionPlan::new(0.3, 1, 1).unwrap();
        run_schedule(&mut source, &mut masks, &["l".to_string()], &plan, BudgetScope::PerLayer, |_| {}).unwrap();

        let active = IndicatorMask::ones(10);
        let expect = threshold_mask(&saliency(&g, &active).unwrap(), &active, 0.3).unwrap();
        assert_eq!(masks[0], expect);
    }

    #[test]
    fn global_scope_lets_layer_ratios_diverge() {
        // Layer 0 has uniformly large gradients, layer 1 tiny ones: under a
        // global budget, layer 0 should keep (almost) everything.
        let grads = vec![vec![1.0; 8], vec![0.001; 8]];
        let mut source = FixedGrads { grads };
        let mut masks = vec![IndicatorMask::ones(8), IndicatorMask::ones(8)];
        let names = vec!["big".to_string(), "small".to_string()];
        let plan = PartitionPlan::new(0.5, 1, 1).unwrap();
        run_schedule(&mut source, &mut masks, &names, &plan, BudgetScope::Global, |_| {}).unwrap();
        assert_eq!(masks[0].dynamic_count() + masks[1].dynamic_count(), 8);
        assert_eq!(masks[0].dynamic_count(), 8);
        assert_eq!(masks[1].dynamic_count(), 0);
    }

    #[test]
    fn per_layer_scope_applies_budget_to_each_layer() {
        let grads = vec![vec![1.0; 8], vec![0.001; 8]];
        let mut source = FixedGrads { grads };
        let mut masks = vec![IndicatorMask::ones(8), IndicatorMask::ones(8)];
        let names = vec!["big".to_string(), "small".to_string()];
        let plan = PartitionPlan::new(0.5, 1, 1).unwrap();
        run_schedule(&mut source, &mut masks, &names, &plan, BudgetScope::PerLayer, |_| {}).unwrap();
        assert_eq!(masks[0].dynamic_count(), 4);
        assert_eq!(masks[1].dynamic_count(), 4);
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn events_report_budgets_and_thresholds() {
        let grads = vec![vec![0.4, 0.3, 0.2, 0.1]];
        let mut source = FixedGrads { grads };
        let mut masks = vec![IndicatorMask::ones(4)];
        let plan = PartitionPlan::new(0.5, 1, 1).unwrap();
        let mut seen = Vec::new();
        run_schedule(&mut source, &mut masks, &["l".to_string()], &plan, BudgetScope::PerLayer, |e| seen.push(e)).unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].kept, 2);
        assert_eq!(seen[0].target_ratio, 0.5);
        assert!((seen[0].threshold_saliency - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn random_mask_hits_budget_and_is_seed_deterministic() {
        let mut a = crate::rng::stream(5, "random-partition");
        let mut b = crate::rng::stream(5, "random-partition");
        let ma = random_mask(20, 0.3, &mut a).unwrap();
        let mb = random_mask(20, 0.3, &mut b).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.dynamic_count(), 6);

        let mut c = crate::rng::stream(6, "random-partition");
        let mc = random_mask(20, 0.3, &mut c).unwrap();
        assert_eq!(mc.dynamic_count(), 6);
        assert_ne!(ma, mc);
    }
}
