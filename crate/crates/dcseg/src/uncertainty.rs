//! Per-voxel uncertainty from the K+1 decoder predictions and the
//! reliable-voxel mask that gates the feature consistency loss.
//!
//! Two complementary scores:
//! * **confidence**: `-mu * ln(mu)` of the mean prediction `mu` — high
//!   when the ensemble is unsure about a voxel (max `1/e` at `mu = 1/e`);
//! * **consensus**: the printed dispersion form
//!   `sqrt(sum_k (q_k - mu)^2 + (p - mu)^2) / (K+1)` — high when the
//!   decoders disagree.
//!
//! Both follow the exact forms the default thresholds (0.34, 0.12)
//! were tuned against: confidence is `-mu ln mu` rather than the full
//! binary entropy (whose scale would not match a 0.34 cutoff), and
//! consensus keeps the `1/(K+1)` factor outside the square root rather
//! than forming a textbook standard deviation. The binary-entropy
//! variant stays available behind [`ConfidenceForm`].
//!
//! All functions here operate on detached prediction values: nothing
//! differentiates through an uncertainty map.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("prediction lengths differ: main {main}, decoder {decoder} has {got}")]
    LengthMismatch {
        main: usize,
        decoder: usize,
        got: usize,
    },
    #[error("at least one auxiliary prediction is required")]
    NoAuxPredictions,
    #[error("thresholds must be positive, got tau_confidence={0}, tau_consensus={1}")]
    BadThresholds(f64, f64),
}

/// Which confidence formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfidenceForm {
    /// `-mu ln mu` (the form the default thresholds assume).
    #[default]
    MeanNegLog,
    /// Full binary entropy `-mu ln mu - (1-mu) ln(1-mu)`.
    BinaryEntropy,
}

/// Pointwise uncertainty maps plus the mean prediction.
#[derive(Debug, Clone)]
pub struct UncertaintyPair {
    pub mean: Vec<f64>,
    pub confidence: Vec<f64>,
    pub consensus: Vec<f64>,
}

/// Voxels passing both uncertainty thresholds (strict, conjunctive).
#[derive(Debug, Clone)]
pub struct ReliableMask {
    pub mask: Vec<bool>,
    pub tau_confidence: f64,
    pub tau_consensus: f64,
}

impl ReliableMask {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.selected() as f64 / self.mask.len() as f64
        }
    }
}

fn check_lengths(main: &[f64], aux: &[&[f64]]) -> Result<(), UncertaintyError> {
    if aux.is_empty() {
        return Err(UncertaintyError::NoAuxPredictions);
    }
    for (k, q) in aux.iter().enumerate() {
        if q.len() != main.len() {
            return Err(UncertaintyError::LengthMismatch {
                main: main.len(),
                decoder: k,
                got: q.len(),
            });
        }
    }
    Ok(())
}

/// Voxelwise mean over the main and the K auxiliary predictions.
pub fn mean_prediction(main: &[f64], aux: &[&[f64]]) -> Result<Vec<f64>, UncertaintyError> {
    check_lengths(main, aux)?;
    let inv = 1.0 / (aux.len() + 1) as f64;
    let mut mean = Vec::with_capacity(main.len());
    for i in 0..main.len() {
        let mut acc = 0.0;
        for q in aux {
            acc += q[i];
        }
        mean.push((acc + main[i]) * inv);
    }
    Ok(mean)
}

/// Confidence score per voxel with the convention `0 * ln 0 = 0`.
pub fn confidence_uncertainty(mean: &[f64], form: ConfidenceForm) -> Vec<f64> {
    let term = |m: f64| if m <= 0.0 { 0.0 } else { -m * m.ln() };
    mean.iter()
        .map(|&m| match form {
            ConfidenceForm::MeanNegLog => term(m),
            ConfidenceForm::BinaryEntropy => term(m) + term(1.0 - m),
        })
        .collect()
}

/// Consensus score per voxel: dispersion of the K+1 predictions around
/// their mean, the `1/(K+1)` factor applied outside the root.
pub fn consensus_uncertainty(
    main: &[f64],
    aux: &[&[f64]],
    mean: &[f64],
) -> Result<Vec<f64>, UncertaintyError> {
    check_lengths(main, aux)?;
    if mean.len() != main.len() {
        return Err(UncertaintyError::LengthMismatch {
            main: main.len(),
            decoder: usize::MAX,
            got: mean.len(),
        });
    }
    let inv = 1.0 / (aux.len() + 1) as f64;
    let mut out = Vec::with_capacity(main.len());
    for i in 0..main.len() {
        let mut acc = 0.0;
        for q in aux {
            let d = q[i] - mean[i];
            acc += d * d;
        }
        let d = main[i] - mean[i];
        acc += d * d;
        out.push(acc.sqrt() * inv);
    }
    Ok(out)
}

/// Both maps in one pass.
pub fn uncertainty_pair(
    main: &[f64],
    aux: &[&[f64]],
    form: ConfidenceForm,
) -> Result<UncertaintyPair, UncertaintyError> {
    let mean = mean_prediction(main, aux)?;
    let confidence = confidence_uncertainty(&mean, form);
    let consensus = consensus_uncertainty(main, aux, &mean)?;
    Ok(UncertaintyPair {
        mean,
        confidence,
        consensus,
    })
}

/// Select voxels with both uncertainties strictly under their
/// thresholds. Monotone: growing either threshold never removes a
/// voxel.
pub fn reliable_mask(
    confidence: &[f64],
    consensus: &[f64],
    tau_confidence: f64,
    tau_consensus: f64,
) -> Result<ReliableMask, UncertaintyError> {
    if tau_confidence <= 0.0 || tau_consensus <= 0.0 {
        return Err(UncertaintyError::BadThresholds(tau_confidence, tau_consensus));
    }
    let mask = confidence
        .iter()
        .zip(consensus)
        .map(|(&um, &us)| um < tau_confidence && us < tau_consensus)
        .collect();
    Ok(ReliableMask {
        mask,
        tau_confidence,
        tau_consensus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E_INV: f64 = 0.36787944117144233; // 1/e

    fn random_preds(rng: &mut ChaCha8Rng, k: usize, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let main: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let aux: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
            .collect();
        (main, aux)
    }

    #[test]
    fn constant_predictions_average_to_the_constant() {
        let main = vec![0.5; 10];
        let aux: Vec<Vec<f64>> = vec![vec![0.5; 10]; 7];
        let refs: Vec<&[f64]> = aux.iter().map(|v| v.as_slice()).collect();
        let mu = mean_prediction(&main, &refs).unwrap();
        assert!(mu.iter().all(|&m| m == 0.5));
    }

    #[test]
    fn two_point_mean() {
        let mu = mean_prediction(&[1.0], &[&[0.0]]).unwrap();
        assert_eq!(mu, vec![0.5]);
    }

    #[test]
    fn mean_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (main, aux) = random_preds(&mut rng, 7, 64);
            let refs: Vec<&[f64]> = aux.iter().map(|v| v.as_slice()).collect();
            let mu = mean_prediction(&main, &refs).unwrap();
            for i in 0..main.len() {
                let mut s = main[i];
                for q in &aux {
                    s += q[i];
                }
                let expect = s / 8.0;
                assert!((mu[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confidence_closed_form_points() {
        let c = confidence_uncertainty(&[1.0, 0.5, E_INV, 0.0], ConfidenceForm::MeanNegLog);
        assert_eq!(c[0], 0.0);
        assert!((c[1] - 0.5 * std::f64::consts::LN_2).abs() < 1e-15); // 0.34657...
        assert!((c[2] - E_INV).abs() < 1e-15); // global max at mu = 1/e
        assert_eq!(c[3], 0.0);
    }

    #[test]
    fn confidence_max_is_at_one_over_e() {
        // -mu ln mu peaks at mu = 1/e with value 1/e; a fine grid never
        // exceeds it.
        for i in 1..10_000 {
            let mu = i as f64 / 10_000.0;
            let c = confidence_uncertainty(&[mu], ConfidenceForm::MeanNegLog)[0];
            assert!(c <= E_INV + 1e-15);
            assert!(c >= 0.0);
        }
    }

    #[test]
    fn binary_entropy_form_is_symmetric() {
        let c = confidence_uncertainty(&[0.3, 0.7], ConfidenceForm::BinaryEntropy);
        assert!((c[0] - c[1]).abs() < 1e-15);
        let half = confidence_uncertainty(&[0.5], ConfidenceForm::BinaryEntropy)[0];
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn consensus_zero_when_all_agree() {
        let main = vec![0.3; 8];
        let aux: Vec<Vec<f64>> = vec![vec![0.3; 8]; 3];
        let refs: Vec<&[f64]> = aux.iter().map(|v| v.as_slice()).collect();
        let mu = mean_prediction(&main, &refs).unwrap();
        let us = consensus_uncertainty(&main, &refs, &mu).unwrap();
        assert!(us.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn consensus_hand_case_k1() {
        // p = 1, q = [0]: mu = 0.5, dispersion = sqrt(0.25 + 0.25)/2.
        let main = vec![1.0];
        let aux = vec![vec![0.0]];
        let refs: Vec<&[f64]> = aux.iter().map(|v| v.as_slice()).collect();
        let mu = mean_prediction(&main, &refs).unwrap();
        let us = consensus_uncertainty(&main, &refs, &mu).unwrap();
        assert!((us[0] - 0.5f64.sqrt() / 2.0).abs() < 1e-15); // 0.35355...
    }

    #[test]
    fn consensus_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (main, aux) = random_preds(&mut rng, 7, 32);
            let refs: Vec<&[f64]> = aux.iter().map(|v| v.as_slice()).collect();
            let mu = mean_prediction(&main, &refs).unwrap();
            let us = consensus_uncertainty(&main, &refs, &mu).unwrap();
            for i in 0..main.len() {
                let mut acc = (main[i] - mu[i]).powi(2);
                for q in &aux {
                    acc += (q[i] - mu[i]).powi(2);
                }
                let expect = acc.sqrt() / 8.0;
                assert!((us[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uncertainty_ranges_hold_on_random_tuples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.gen_range(1..=7);
            let (main, aux) = random_preds(&mut rng, k, 16);
            let refs: Vec<&[f64]> = aux.iter().map(|v| v.as_slice()).collect();
            let pair = uncertainty_pair(&main, &refs, ConfidenceForm::MeanNegLog).unwrap();
            for i in 0..16 {
                assert!(pair.confidence[i] >= 0.0 && pair.confidence[i] <= E_INV + 1e-15);
                assert!(pair.consensus[i] >= 0.0 && pair.consensus[i] <= 0.5 + 1e-15);
                assert!(pair.mean[i] >= 0.0 && pair.mean[i] <= 1.0);
            }
        }
    }

    #[test]
    fn permutation_symmetry_of_the_ensemble() {
        // Swapping which decoder produced which prediction changes
        // nothing beyond summation rounding: the scores only see the
        // multiset of values at each voxel.
        let close = |x: &[f64], y: &[f64]| {
            x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-14)
        };
        let main = vec![0.9, 0.1];
        let a = vec![0.2, 0.8];
        let b = vec![0.6, 0.4];
        let mu1 = mean_prediction(&main, &[&a, &b]).unwrap();
        let mu2 = mean_prediction(&main, &[&b, &a]).unwrap();
        assert!(close(&mu1, &mu2));
        let us1 = consensus_uncertainty(&main, &[&a, &b], &mu1).unwrap();
        let us2 = consensus_uncertainty(&main, &[&b, &a], &mu2).unwrap();
        assert!(close(&us1, &us2));
        // The main slot is symmetric, too: swap p with one q.
        let mu3 = mean_prediction(&a, &[&main, &b]).unwrap();
        let us3 = consensus_uncertainty(&a, &[&main, &b], &mu3).unwrap();
        assert!(close(&mu1, &mu3));
        assert!(close(&us1, &us3));
    }

    #[test]
    fn reliable_mask_default_thresholds() {
        let um = vec![0.2, 0.4];
        let us = vec![0.05, 0.05];
        let mask = reliable_mask(&um, &us, 0.34, 0.12).unwrap();
        assert_eq!(mask.mask, vec![true, false]);
    }

    #[test]
    fn vacuous_and_empty_thresholds() {
        let um = vec![0.1, 0.3, 0.36];
        let us = vec![0.0, 0.1, 0.49];
        let all = reliable_mask(&um, &us, 1e6, 1e6).unwrap();
        assert_eq!(all.selected(), 3);
        // Strict inequality: a zero-valued score still fails a zero
        // threshold, so zero thresholds are rejected as non-positive.
        assert!(matches!(
            reliable_mask(&um, &us, 0.0, 0.0),
            Err(UncertaintyError::BadThresholds(_, _))
        ));
        let tiny = reliable_mask(&[0.0], &[0.0], f64::MIN_POSITIVE, f64::MIN_POSITIVE).unwrap();
        assert_eq!(tiny.selected(), 1);
    }

    #[test]
    fn mask_is_monotone_in_both_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let um: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..0.37)).collect();
        let us: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..0.5)).collect();
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
        for (i, &tm) in grid.iter().enumerate() {
            for (j, &ts) in grid.iter().enumerate() {
                let small = reliable_mask(&um, &us, tm, ts).unwrap();
                for (&tm2, &ts2) in grid[i..].iter().zip(&grid[j..]) {
                    let big = reliable_mask(&um, &us, tm2, ts2).unwrap();
                    for (a, b) in small.mask.iter().zip(&big.mask) {
                        assert!(!a | b, "mask lost a voxel when thresholds grew");
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            mean_prediction(&[0.1, 0.2], &[&[0.1]]),
            Err(UncertaintyError::LengthMismatch { .. })
        ));
        assert_eq!(
            mean_prediction(&[0.1], &[]),
            Err(UncertaintyError::NoAuxPredictions)
        );
    }
}
