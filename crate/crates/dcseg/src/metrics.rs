//! Overlap and surface-distance metrics for binary segmentations.
//!
//! Dice and Jaccard are reported as percentages; the average symmetric
//! surface distance (ASD) in millimeters, computed over 6-connected
//! surface voxels with the volume border counting as background.
//! Surfaces at desk scale stay small, so nearest-surface distances are
//! found by direct search.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask dims differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("ASD is undefined: {0} mask has no foreground")]
    EmptySurface(&'static str),
    #[error("mask data length {got} does not match dims {dims:?}")]
    DataLength { dims: [usize; 3], got: usize },
}

/// A boolean 3-D grid with per-axis voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self, MetricsError> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<bool>,
    ) -> Result<Self, MetricsError> {
        if dims[0] * dims[1] * dims[2] != data.len() {
            return Err(MetricsError::DataLength {
                dims,
                got: data.len(),
            });
        }
        Ok(BinaryMask {
            dims,
            spacing,
            data,
        })
    }

    /// Threshold a probability volume at 0.5.
    pub fn from_probabilities(dims: [usize; 3], spacing: [f64; 3], probs: &[f32]) -> Self {
        BinaryMask {
            dims,
            spacing,
            data: probs.iter().map(|&p| p > 0.5).collect(),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    /// Foreground voxels with at least one background 6-neighbor; the
    /// volume border counts as background.
    pub fn surface_voxels(&self) -> Vec<[usize; 3]> {
        let [dx, dy, dz] = self.dims;
        let mut out = Vec::new();
        for x in 0..dx {
            for y in 0..dy {
                for z in 0..dz {
                    if !self.at(x, y, z) {
                        continue;
                    }
                    let exposed = x == 0
                        || x == dx - 1
                        || y == 0
                        || y == dy - 1
                        || z == 0
                        || z == dz - 1
                        || !self.at(x - 1, y, z)
                        || !self.at(x + 1, y, z)
                        || !self.at(x, y - 1, z)
                        || !self.at(x, y + 1, z)
                        || !self.at(x, y, z - 1)
                        || !self.at(x, y, z + 1);
                    if exposed {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<(), MetricsError> {
    if pred.dims != gt.dims {
        return Err(MetricsError::DimsMismatch(pred.dims, gt.dims));
    }
    Ok(())
}

/// Dice overlap in percent: `100 * 2|P∩G| / (|P|+|G|)`; 100 when both
/// masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Jaccard overlap in percent: `100 * |P∩G| / |P∪G|`; 100 when both
/// masks are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

fn nearest_surface_distance(from: [usize; 3], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for b in to {
        let mut d2 = 0.0;
        for a in 0..3 {
            let diff = (from[a] as f64 - b[a] as f64) * spacing[a];
            d2 += diff * diff;
        }
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// Average symmetric surface distance in millimeters with explicit
/// voxel spacing. Errors when either mask is empty; callers report
/// such cases as missing rather than folding a sentinel into means.
pub fn asd_with_spacing(
    pred: &BinaryMask,
    gt: &BinaryMask,
    spacing: [f64; 3],
) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let sp = pred.surface_voxels();
    let sg = gt.surface_voxels();
    if sp.is_empty() {
        return Err(MetricsError::EmptySurface("prediction"));
    }
    if sg.is_empty() {
        return Err(MetricsError::EmptySurface("ground-truth"));
    }
    let sum_p: f64 = sp
        .par_iter()
        .map(|&a| nearest_surface_distance(a, &sg, spacing))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let sum_g: f64 = sg
        .par_iter()
        .map(|&b| nearest_surface_distance(b, &sp, spacing))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok((sum_p + sum_g) / (sp.len() + sg.len()) as f64)
}

/// ASD using the masks' own spacing (which must agree).
pub fn asd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    asd_with_spacing(pred, gt, pred.spacing)
}

/// Per-case metric triple. `asd` is `None` when either surface was
/// empty; aggregates count those separately.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dsc: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
}

pub fn metric_report(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport, MetricsError> {
    Ok(MetricReport {
        dsc: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        asd: match asd(pred, gt) {
            Ok(v) => Some(v),
            Err(MetricsError::EmptySurface(_)) => None,
            Err(e) => return Err(e),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_indices(dims: [usize; 3], on: &[usize]) -> BinaryMask {
        let mut data = vec![false; dims[0] * dims[1] * dims[2]];
        for &i in on {
            data[i] = true;
        }
        BinaryMask::new(dims, data).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> BinaryMask {
        let data = (0..dims[0] * dims[1] * dims[2])
            .map(|_| rng.gen::<f64>() < p)
            .collect();
        BinaryMask::new(dims, data).unwrap()
    }

    // Deliberately naive re-derivation: scan every voxel for surface
    // membership, then take all-pairs minima in plain nested loops.
    fn asd_oracle(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Option<f64> {
        fn naive_surface(m: &BinaryMask) -> Vec<(i64, i64, i64)> {
            let d = [m.dims[0] as i64, m.dims[1] as i64, m.dims[2] as i64];
            let get = |x: i64, y: i64, z: i64| -> bool {
                if x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2] {
                    false
                } else {
                    m.data[((x * d[1] + y) * d[2] + z) as usize]
                }
            };
            let mut s = Vec::new();
            for x in 0..d[0] {
                for y in 0..d[1] {
                    for z in 0..d[2] {
                        if get(x, y, z) {
                            let neighbors = [
                                get(x - 1, y, z),
                                get(x + 1, y, z),
                                get(x, y - 1, z),
                                get(x, y + 1, z),
                                get(x, y, z - 1),
                                get(x, y, z + 1),
                            ];
                            if neighbors.iter().any(|&n| !n) {
                                s.push((x, y, z));
                            }
                        }
                    }
                }
            }
            s
        }
        let sp = naive_surface(pred);
        let sg = naive_surface(gt);
        if sp.is_empty() || sg.is_empty() {
            return None;
        }
        let dist = |a: (i64, i64, i64), b: (i64, i64, i64)| -> f64 {
            let dx = (a.0 - b.0) as f64 * spacing[0];
            let dy = (a.1 - b.1) as f64 * spacing[1];
            let dz = (a.2 - b.2) as f64 * spacing[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        let mut total = 0.0;
        for &a in &sp {
            let mut best = f64::INFINITY;
            for &b in &sg {
                best = best.min(dist(a, b));
            }
            total += best;
        }
        for &b in &sg {
            let mut best = f64::INFINITY;
            for &a in &sp {
                best = best.min(dist(a, b));
            }
            total += best;
        }
        Some(total / (sp.len() + sg.len()) as f64)
    }

    #[test]
    fn identical_masks_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, [6, 6, 6], 0.3);
        assert_eq!(dice(&m, &m).unwrap(), 100.0);
        assert_eq!(jaccard(&m, &m).unwrap(), 100.0);
        assert_eq!(asd(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask_from_indices([4, 4, 4], &[0, 1]);
        let b = mask_from_indices([4, 4, 4], &[10, 11]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn both_empty_is_perfect_by_convention() {
        let a = mask_from_indices([3, 3, 3], &[]);
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn counted_overlap_cases() {
        // |P| = 4, |G| = 4, overlap 2 -> DSC 50.
        let p = mask_from_indices([4, 4, 4], &[0, 1, 2, 3]);
        let g = mask_from_indices([4, 4, 4], &[2, 3, 4, 5]);
        assert_eq!(dice(&p, &g).unwrap(), 50.0);
        // |P∩G| = 2, |P∪G| = 6 -> Jaccard 33.33...
        let j = jaccard(&p, &g).unwrap();
        assert!((j - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn jaccard_dice_identity_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = random_mask(&mut rng, [5, 5, 5], 0.4);
            let g = random_mask(&mut rng, [5, 5, 5], 0.4);
            let d = dice(&p, &g).unwrap();
            let j = jaccard(&p, &g).unwrap();
            let expect = d / (200.0 - d) * 100.0;
            assert!((j - expect).abs() < 1e-9, "J={j} D={d}");
        }
    }

    #[test]
    fn single_voxel_distance() {
        let p = mask_from_indices([5, 5, 5], &[0]); // (0,0,0)
        let g = mask_from_indices([5, 5, 5], &[3 * 25]); // (3,0,0)
        assert!((asd(&p, &g).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn asd_respects_spacing() {
        let p = mask_from_indices([5, 5, 5], &[0]);
        let g = mask_from_indices([5, 5, 5], &[3 * 25]);
        let v = asd_with_spacing(&p, &g, [0.5, 1.0, 1.0]).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_asd_is_a_defined_failure() {
        let p = mask_from_indices([3, 3, 3], &[]);
        let g = mask_from_indices([3, 3, 3], &[0]);
        assert_eq!(
            asd(&p, &g).unwrap_err(),
            MetricsError::EmptySurface("prediction")
        );
        assert_eq!(
            asd(&g, &p).unwrap_err(),
            MetricsError::EmptySurface("ground-truth")
        );
        let report = metric_report(&p, &g).unwrap();
        assert_eq!(report.asd, None);
    }

    #[test]
    fn asd_matches_all_pairs_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 100 {
            let p = random_mask(&mut rng, [8, 8, 8], 0.2);
            let g = random_mask(&mut rng, [8, 8, 8], 0.2);
            let Some(expect) = asd_oracle(&p, &g, [1.0; 3]) else {
                continue;
            };
            let got = asd(&p, &g).unwrap();
            assert!((got - expect).abs() < 1e-9, "got {got}, oracle {expect}");
            assert_eq!(asd(&p, &g).unwrap(), asd(&g, &p).unwrap());
            checked += 1;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = mask_from_indices([2, 2, 2], &[0]);
        let b = mask_from_indices([2, 2, 3], &[0]);
        assert!(matches!(
            dice(&a, &b),
            Err(MetricsError::DimsMismatch(_, _))
        ));
    }

    #[test]
    fn translation_invariance_away_from_borders() {
        // A 2x2x2 block, then the same block shifted by (1,1,1); both
        // fully interior in a 8^3 grid.
        let dims = [8, 8, 8];
        let block = |ox: usize, oy: usize, oz: usize| {
            let mut on = Vec::new();
            for x in 0..2 {
                for y in 0..2 {
                    for z in 0..2 {
                        on.push(((ox + x) * 8 + (oy + y)) * 8 + (oz + z));
                    }
                }
            }
            mask_from_indices(dims, &on)
        };
        let (p1, g1) = (block(2, 2, 2), block(3, 2, 2));
        let (p2, g2) = (block(3, 3, 3), block(4, 3, 3));
        assert_eq!(dice(&p1, &g1).unwrap(), dice(&p2, &g2).unwrap());
        assert_eq!(jaccard(&p1, &g1).unwrap(), jaccard(&p2, &g2).unwrap());
        assert_eq!(asd(&p1, &g1).unwrap(), asd(&p2, &g2).unwrap());
    }

    #[test]
    fn growing_overlap_never_decreases_overlap_scores() {
        // Fixed-size masks; slide the prediction toward the target one
        // voxel at a time so the overlap grows.
        let dims = [10, 4, 4];
        let gt_on: Vec<usize> = (0..4).map(|x| ((x + 3) * 4) * 4).collect();
        let gt = mask_from_indices(dims, &gt_on);
        let mut last_d = -1.0;
        let mut last_j = -1.0;
        for shift in 0..4 {
            let pred_on: Vec<usize> = (0..4).map(|x| ((x + shift) * 4) * 4).collect();
            let pred = mask_from_indices(dims, &pred_on);
            let d = dice(&pred, &gt).unwrap();
            let j = jaccard(&pred, &gt).unwrap();
            assert!(d >= last_d && j >= last_j, "shift {shift}: {d} {j}");
            last_d = d;
            last_j = j;
        }
        assert_eq!(last_d, 100.0);
    }
}
