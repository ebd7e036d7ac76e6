//! Training objectives.
//!
//! * supervised: soft Dice (smoothing 1) plus voxel-mean binary cross
//!   entropy with probabilities clamped at `1e-7`;
//! * image consistency: mean squared difference between the plain
//!   prediction and the inverse-transformed prediction of the
//!   transformed input;
//! * feature consistency: mean squared difference between the main
//!   prediction and each auxiliary prediction, averaged over voxels
//!   and decoders;
//! * masked feature consistency: the same sum restricted to reliable
//!   voxels, normalized by `K * max(|selected|, 1)` so its scale stays
//!   comparable to the unmasked form as the mask shrinks;
//! * a ramp weight `exp(-5 (1 - min(step/len, 1))^2)` that eases the
//!   consistency terms in.
//!
//! Gradients flow through both sides of every consistency pair unless
//! the caller detaches the main prediction (a constant node does that).

use crate::tensor::{Element, Graph, NodeId, Tensor, TensorError};
use crate::transform::Transform;
use crate::uncertainty::ReliableMask;
use thiserror::Error;

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target is not binary at flat index {index} (value {value})")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("feature consistency needs at least one auxiliary prediction")]
    NoAuxPredictions,
    #[error("ramp length must be >= 1, got {0}")]
    BadRampLength(i64),
    #[error("reliable mask has {mask} entries but predictions have {pred}")]
    MaskLength { mask: usize, pred: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dice + binary cross entropy against a binary target.
pub fn supervised_loss<E: Element>(
    g: &mut Graph<E>,
    pred: NodeId,
    target: &Tensor<E>,
) -> Result<NodeId, LossError> {
    for (i, &v) in target.data().iter().enumerate() {
        let v64 = v.to_f64();
        if v64 != 0.0 && v64 != 1.0 {
            return Err(LossError::NonBinaryTarget {
                index: i,
                value: v64,
            });
        }
    }
    let y = g.constant(target.clone());
    let one_scalar = g.constant(Tensor::scalar(E::ONE));
    let ones = g.constant(Tensor::full(target.shape(), E::ONE));

    // Soft Dice with +1 smoothing on both sides of the ratio.
    let py = g.mul(pred, y)?;
    let inter = g.sum(py)?;
    let num = g.scalar_mul(inter, 2.0)?;
    let num = g.add(num, one_scalar)?;
    let sum_p = g.sum(pred)?;
    let sum_y = g.sum(y)?;
    let den = g.add(sum_p, sum_y)?;
    let den = g.add(den, one_scalar)?;
    let den_inv = g.recip(den)?;
    let overlap = g.mul(num, den_inv)?;
    let dice_term = g.sub(one_scalar, overlap)?;

    // Mean BCE with clamped probabilities.
    let pc = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = g.log(pc)?;
    let one_minus_pc = g.sub(ones, pc)?;
    let log_np = g.log(one_minus_pc)?;
    let pos = g.mul(y, log_p)?;
    let one_minus_y = g.sub(ones, y)?;
    let neg = g.mul(one_minus_y, log_np)?;
    let ll = g.add(pos, neg)?;
    let mean_ll = g.mean(ll)?;
    let bce = g.scalar_mul(mean_ll, -1.0)?;

    Ok(g.add(dice_term, bce)?)
}

/// Mean squared voxel difference between the untransformed prediction
/// and the inverse-transformed prediction of the transformed input.
pub fn image_consistency_loss<E: Element>(
    g: &mut Graph<E>,
    pred: NodeId,
    transformed_pred: NodeId,
    t: &Transform,
) -> Result<NodeId, LossError> {
    let aligned = g.spatial_transform(transformed_pred, t.invert())?;
    let diff = g.sub(pred, aligned)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// Mean over voxels and decoders of the squared main-vs-auxiliary
/// difference.
pub fn feature_consistency_loss<E: Element>(
    g: &mut Graph<E>,
    pred: NodeId,
    aux_preds: &[NodeId],
) -> Result<NodeId, LossError> {
    if aux_preds.is_empty() {
        return Err(LossError::NoAuxPredictions);
    }
    let n = g.value(pred).numel();
    let mut acc: Option<NodeId> = None;
    for &q in aux_preds {
        let diff = g.sub(pred, q)?;
        let sq = g.square(diff)?;
        let s = g.sum(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let total = acc.expect("at least one decoder");
    Ok(g.scalar_mul(total, 1.0 / (n * aux_preds.len()) as f64)?)
}

/// Outcome details of the masked consistency term.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLossInfo {
    pub selected: usize,
    pub fraction: f64,
    /// True when the mask was empty and the term contributed zero.
    pub empty_mask: bool,
}

/// Feature consistency restricted to the reliable voxels, normalized
/// by `K * max(|selected|, 1)`. An empty mask yields a zero loss and a
/// flag instead of an error.
pub fn masked_feature_consistency_loss<E: Element>(
    g: &mut Graph<E>,
    pred: NodeId,
    aux_preds: &[NodeId],
    omega: &ReliableMask,
) -> Result<(NodeId, MaskedLossInfo), LossError> {
    if aux_preds.is_empty() {
        return Err(LossError::NoAuxPredictions);
    }
    let shape = g.value(pred).shape().to_vec();
    let n: usize = shape.iter().product();
    if omega.mask.len() != n {
        return Err(LossError::MaskLength {
            mask: omega.mask.len(),
            pred: n,
        });
    }
    let selected = omega.selected();
    let info = MaskedLossInfo {
        selected,
        fraction: omega.fraction(),
        empty_mask: selected == 0,
    };
    if selected == 0 {
        let zero = g.constant(Tensor::scalar(E::ZERO));
        return Ok((zero, info));
    }
    let mask_data: Vec<E> = omega
        .mask
        .iter()
        .map(|&m| if m { E::ONE } else { E::ZERO })
        .collect();
    let mask = g.constant(Tensor::from_vec(shape, mask_data)?);
    let mut acc: Option<NodeId> = None;
    for &q in aux_preds {
        let diff = g.sub(pred, q)?;
        let sq = g.square(diff)?;
        let masked = g.mask_select(sq, mask)?;
        let s = g.sum(masked)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let total = acc.expect("at least one decoder");
    let norm = 1.0 / (aux_preds.len() * selected.max(1)) as f64;
    Ok((g.scalar_mul(total, norm)?, info))
}

/// Consistency ramp weight: 0 -> 1 over `ramp_length` steps along
/// `exp(-5 (1 - s)^2)`, saturated at 1 afterwards.
pub fn ramp_weight(step: usize, ramp_length: usize) -> Result<f64, LossError> {
    if ramp_length == 0 {
        return Err(LossError::BadRampLength(0));
    }
    let s = (step as f64 / ramp_length as f64).min(1.0);
    Ok((-5.0 * (1.0 - s) * (1.0 - s)).exp())
}

/// Weighted sum of the present terms as a graph node.
pub fn total_loss<E: Element>(
    g: &mut Graph<E>,
    supervised: Option<NodeId>,
    image_consistency: Option<NodeId>,
    masked_feature_consistency: Option<NodeId>,
    alpha: f64,
    beta: f64,
) -> Result<NodeId, LossError> {
    let mut acc = supervised;
    if let Some(ic) = image_consistency {
        let w = g.scalar_mul(ic, alpha)?;
        acc = Some(match acc {
            Some(a) => g.add(a, w)?,
            None => w,
        });
    }
    if let Some(fc) = masked_feature_consistency {
        let w = g.scalar_mul(fc, beta)?;
        acc = Some(match acc {
            Some(a) => g.add(a, w)?,
            None => w,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(E::ZERO)),
    })
}

/// Per-step loss values as logged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub supervised: Option<f64>,
    pub image_consistency: Option<f64>,
    /// Unmasked feature consistency, logged as a diagnostic only.
    pub feature_consistency_unmasked: Option<f64>,
    pub masked_feature_consistency: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
    pub reliable_fraction: Option<f64>,
    pub empty_mask: bool,
}

impl LossReport {
    /// Recompute the weighted sum and compare against `total`.
    pub fn total_is_consistent(&self, rel_tol: f64) -> bool {
        let expect = self.supervised.unwrap_or(0.0)
            + self.alpha * self.image_consistency.unwrap_or(0.0)
            + self.beta * self.masked_feature_consistency.unwrap_or(0.0);
        (self.total - expect).abs() <= rel_tol * expect.abs().max(1e-30)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::uncertainty::reliable_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn scalar(g: &Graph<f64>, id: NodeId) -> f64 {
        g.scalar_value(id).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_supervised_loss() {
        let mut g = Graph::<f64>::new();
        let y = t64(&[8], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let p = g.input("p", y.clone());
        let loss = supervised_loss(&mut g, p, &y).unwrap();
        assert!(scalar(&g, loss) < 1e-6);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        // p = 0.5 everywhere: BCE = ln 2 whatever the target; the Dice
        // term is subtracted off using its closed form.
        let mut g = Graph::<f64>::new();
        let y = t64(&[8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let p = g.input("p", Tensor::full(&[8], 0.5));
        let loss = supervised_loss(&mut g, p, &y).unwrap();
        let dice_term = 1.0 - (2.0 * 2.0 + 1.0) / (4.0 + 4.0 + 1.0);
        let bce = scalar(&g, loss) - dice_term;
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-9, "bce = {bce}");
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.input("p", Tensor::full(&[4], 0.5));
        let y = t64(&[4], &[0.0, 1.0, 0.5, 0.0]);
        assert!(matches!(
            supervised_loss(&mut g, p, &y),
            Err(LossError::NonBinaryTarget { index: 2, .. })
        ));
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 64; // a 4^3 patch
        let p_data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
        let y_data: Vec<f64> = (0..n).map(|_| f64::from(rng.gen::<bool>() as u8)).collect();
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t64(&[n], &p_data));
        let loss = supervised_loss(&mut g, p, &t64(&[n], &y_data)).unwrap();
        let report = grad_check(&mut g, loss, 1e-6).unwrap();
        assert!(report.max_rel_err() < 1e-6, "{}", report.max_rel_err());
    }

    #[test]
    fn identity_transform_on_identical_predictions_is_zero() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.31).sin().abs()).collect();
        let p = g.input("p", t64(&[1, 1, 4, 4, 4], &data));
        let pt = g.input("pt", t64(&[1, 1, 4, 4, 4], &data));
        let loss = image_consistency_loss(&mut g, p, pt, &Transform::identity()).unwrap();
        assert_eq!(scalar(&g, loss), 0.0);
    }

    #[test]
    fn max_disagreement_gives_unit_mse() {
        let mut g = Graph::<f64>::new();
        let p = g.input("p", Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let pt = g.input("pt", Tensor::full(&[1, 1, 2, 2, 2], 0.0));
        let loss = image_consistency_loss(&mut g, p, pt, &Transform::identity()).unwrap();
        assert_eq!(scalar(&g, loss), 1.0);
    }

    #[test]
    fn image_consistency_undoes_the_transform() {
        // Predict on a transformed input, then check that the aligned
        // comparison against the straight prediction of the same map
        // is exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let t = Transform {
            src: [2, 0, 1],
            flip: [true, false, true],
            shift: [0; 3],
        };
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[1, 1, 4, 4, 4], &data));
        let p_t = g.spatial_transform(p, t).unwrap();
        let loss = image_consistency_loss(&mut g, p, p_t, &t).unwrap();
        assert_eq!(scalar(&g, loss), 0.0);
    }

    #[test]
    fn image_consistency_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = 27;
            let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let mut g = Graph::<f64>::new();
            let p = g.input("p", t64(&[1, 1, 3, 3, 3], &a));
            let q = g.input("q", t64(&[1, 1, 3, 3, 3], &b));
            let loss = image_consistency_loss(&mut g, p, q, &Transform::identity()).unwrap();
            let mut expect = 0.0;
            for i in 0..n {
                expect += (a[i] - b[i]) * (a[i] - b[i]);
            }
            expect /= n as f64;
            assert!((scalar(&g, loss) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_consistency_zero_and_max() {
        let mut g = Graph::<f64>::new();
        let p = g.input("p", Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let same = g.input("q0", Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let loss = feature_consistency_loss(&mut g, p, &[same]).unwrap();
        assert_eq!(scalar(&g, loss), 0.0);
        let far = g.input("q1", Tensor::full(&[1, 1, 2, 2, 2], 0.0));
        let loss = feature_consistency_loss(&mut g, p, &[far]).unwrap();
        assert_eq!(scalar(&g, loss), 1.0);
    }

    #[test]
    fn feature_consistency_hand_case() {
        // K = 2, p = [1, 0], q1 = [0, 0], q2 = [1, 1]:
        // (1/(2*2)) * (1 + 0 + 0 + 1) = 0.5
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[2], &[1.0, 0.0]));
        let q1 = g.input("q1", t64(&[2], &[0.0, 0.0]));
        let q2 = g.input("q2", t64(&[2], &[1.0, 1.0]));
        let loss = feature_consistency_loss(&mut g, p, &[q1, q2]).unwrap();
        assert_eq!(scalar(&g, loss), 0.5);
    }

    #[test]
    fn feature_consistency_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = 32;
            let k = rng.gen_range(1..=7);
            let p_data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let q_data: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let mut g = Graph::<f64>::new();
            let p = g.input("p", t64(&[n], &p_data));
            let qs: Vec<NodeId> = q_data
                .iter()
                .enumerate()
                .map(|(i, q)| g.input(format!("q{i}"), t64(&[n], q)))
                .collect();
            let loss = feature_consistency_loss(&mut g, p, &qs).unwrap();
            let mut expect = 0.0;
            for q in &q_data {
                for i in 0..n {
                    expect += (p_data[i] - q[i]) * (p_data[i] - q[i]);
                }
            }
            expect /= (n * k) as f64;
            assert!((scalar(&g, loss) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn full_mask_reduces_to_unmasked_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 27;
        let p_data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let q_data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[n], &p_data));
        let q = g.input("q", t64(&[n], &q_data));
        let fc = feature_consistency_loss(&mut g, p, &[q]).unwrap();
        let omega = reliable_mask(&vec![0.0; n], &vec![0.0; n], 1.0, 1.0).unwrap();
        let (ufc, info) = masked_feature_consistency_loss(&mut g, p, &[q], &omega).unwrap();
        assert!(!info.empty_mask);
        assert_eq!(
            scalar(&g, fc).to_bits(),
            scalar(&g, ufc).to_bits(),
            "full mask must reduce the masked loss to the unmasked one"
        );
    }

    #[test]
    fn empty_mask_contributes_zero_and_flags() {
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[4], &[1.0, 0.0, 1.0, 0.0]));
        let q = g.input("q", t64(&[4], &[0.0, 1.0, 0.0, 1.0]));
        let omega = reliable_mask(&[9.0, 9.0, 9.0, 9.0], &[9.0; 4], 0.1, 0.1).unwrap();
        let (ufc, info) = masked_feature_consistency_loss(&mut g, p, &[q], &omega).unwrap();
        assert!(info.empty_mask);
        assert_eq!(scalar(&g, ufc), 0.0);
    }

    #[test]
    fn masked_hand_case_counts_only_selected_voxels() {
        // K = 1, p = [1,0], q = [0,1], mask = [1,0]: only voxel 0, so
        // the normalized loss is exactly 1.
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[2], &[1.0, 0.0]));
        let q = g.input("q", t64(&[2], &[0.0, 1.0]));
        let omega = reliable_mask(&[0.0, 9.0], &[0.0, 9.0], 0.5, 0.5).unwrap();
        let (ufc, info) = masked_feature_consistency_loss(&mut g, p, &[q], &omega).unwrap();
        assert_eq!(info.selected, 1);
        assert_eq!(scalar(&g, ufc), 1.0);
    }

    #[test]
    fn shrinking_mask_on_high_error_voxels_never_increases_loss() {
        // Squared errors 0.9, 0.7, 0.5, 0.3; drop the worst voxel one
        // at a time. Each removed voxel carries above-average error,
        // so the normalized loss must not increase.
        let errs = [0.9f64, 0.7, 0.5, 0.3];
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[4], &errs.map(|e| e.sqrt())));
        let q = g.input("q", t64(&[4], &[0.0; 4]));
        let mut last = f64::INFINITY;
        for keep in (1..=4usize).rev() {
            // Keep the `keep` lowest-error voxels; the dropped ones all
            // carry above-average squared error.
            let um: Vec<f64> = (0..4).map(|i| if i >= 4 - keep { 0.0 } else { 9.0 }).collect();
            let omega = reliable_mask(&um, &vec![0.0; 4], 0.5, 0.5).unwrap();
            let (ufc, _) = masked_feature_consistency_loss(&mut g, p, &[q], &omega).unwrap();
            let v = scalar(&g, ufc);
            assert!(v <= last + 1e-15, "loss grew from {last} to {v}");
            last = v;
        }
    }

    #[test]
    fn ramp_endpoints_and_midpoint() {
        assert!((ramp_weight(0, 100).unwrap() - (-5.0f64).exp()).abs() < 1e-12);
        assert!((ramp_weight(50, 100).unwrap() - (-1.25f64).exp()).abs() < 1e-12);
        assert_eq!(ramp_weight(100, 100).unwrap(), 1.0);
        assert_eq!(ramp_weight(250, 100).unwrap(), 1.0);
        assert!(ramp_weight(0, 0).is_err());
    }

    #[test]
    fn ramp_is_monotone() {
        let mut last = 0.0;
        for step in 0..=120 {
            let w = ramp_weight(step, 100).unwrap();
            assert!(w >= last && w > 0.0 && w <= 1.0);
            last = w;
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let ls = g.constant(Tensor::scalar(1.0));
        let ic = g.constant(Tensor::scalar(2.0));
        let fc = g.constant(Tensor::scalar(3.0));
        let total = total_loss(&mut g, Some(ls), Some(ic), Some(fc), 1.0, 1.0).unwrap();
        assert_eq!(scalar(&g, total), 6.0);
        let only_s = total_loss(&mut g, Some(ls), None, None, 0.5, 0.5).unwrap();
        assert_eq!(scalar(&g, only_s), 1.0);
    }

    #[test]
    fn report_consistency_check() {
        let report = LossReport {
            supervised: Some(0.8),
            image_consistency: Some(0.2),
            feature_consistency_unmasked: Some(0.5),
            masked_feature_consistency: Some(0.4),
            alpha: 0.3,
            beta: 0.6,
            total: 0.8 + 0.3 * 0.2 + 0.6 * 0.4,
            reliable_fraction: Some(0.9),
            empty_mask: false,
        };
        assert!(report.total_is_consistent(1e-6));
        let broken = LossReport {
            total: 99.0,
            ..report
        };
        assert!(!broken.total_is_consistent(1e-6));
    }

    #[test]
    fn consistency_losses_vanish_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 27;
        let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut b = a.clone();
        b[13] += 1e-3;
        let mut g = Graph::<f64>::new();
        let p = g.input("p", t64(&[1, 1, 3, 3, 3], &a));
        let q_same = g.input("qs", t64(&[1, 1, 3, 3, 3], &a));
        let q_diff = g.input("qd", t64(&[1, 1, 3, 3, 3], &b));
        let zero = feature_consistency_loss(&mut g, p, &[q_same]).unwrap();
        let pos = feature_consistency_loss(&mut g, p, &[q_diff]).unwrap();
        assert!(scalar(&g, zero) < 1e-12);
        assert!(scalar(&g, pos) > 1e-12);
        let zero_ic = image_consistency_loss(&mut g, p, q_same, &Transform::identity()).unwrap();
        let pos_ic = image_consistency_loss(&mut g, p, q_diff, &Transform::identity()).unwrap();
        assert!(scalar(&g, zero_ic) < 1e-12);
        assert!(scalar(&g, pos_ic) > 1e-12);
    }
}
