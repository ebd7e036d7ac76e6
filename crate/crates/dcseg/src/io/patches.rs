//! Patch geometry for sliding-window inference.

use super::{IoError, Volume};

/// Corner coordinates of a stride-spaced patch grid covering the whole
/// volume; the last position per axis is clamped so the final patch
/// touches the boundary. A stride wider than the patch would leave
/// gaps, so the effective stride per axis is capped at the patch size.
pub fn sliding_positions(
    volume: [usize; 3],
    patch: [usize; 3],
    stride: usize,
) -> Result<Vec<[usize; 3]>, IoError> {
    if stride == 0 {
        return Err(IoError::ZeroStride);
    }
    if (0..3).any(|a| patch[a] > volume[a] || patch[a] == 0) {
        return Err(IoError::PatchTooLarge { patch, volume });
    }
    let axis_positions = |a: usize| -> Vec<usize> {
        let step = stride.min(patch[a]);
        let last = volume[a] - patch[a];
        let mut xs: Vec<usize> = (0..).map(|i| i * step).take_while(|&p| p <= last).collect();
        if *xs.last().expect("0 is always included") != last {
            xs.push(last);
        }
        xs
    };
    let (xs, ys, zs) = (axis_positions(0), axis_positions(1), axis_positions(2));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Copy a `patch`-sized block starting at `corner` out of a volume.
pub fn extract_patch(v: &Volume, corner: [usize; 3], patch: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for x in 0..patch[0] {
        for y in 0..patch[1] {
            let row = ((corner[0] + x) * v.dims[1] + corner[1] + y) * v.dims[2] + corner[2];
            out.extend_from_slice(&v.data[row..row + patch[2]]);
        }
    }
    out
}

/// Accumulates overlapping patch predictions; each voxel's final value
/// is the mean over all patches covering it.
pub struct OverlapAccumulator {
    dims: [usize; 3],
    spacing: [f32; 3],
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl OverlapAccumulator {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        OverlapAccumulator {
            dims,
            spacing,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add_patch(&mut self, corner: [usize; 3], patch: [usize; 3], values: &[f32]) {
        debug_assert_eq!(values.len(), patch[0] * patch[1] * patch[2]);
        let mut i = 0;
        for x in 0..patch[0] {
            for y in 0..patch[1] {
                let row =
                    ((corner[0] + x) * self.dims[1] + corner[1] + y) * self.dims[2] + corner[2];
                for z in 0..patch[2] {
                    self.sum[row + z] += values[i] as f64;
                    self.count[row + z] += 1;
                    i += 1;
                }
            }
        }
    }

    /// Mean prediction per voxel. Panics if some voxel was never
    /// covered; `sliding_positions` guarantees full coverage.
    pub fn finish(self) -> Volume {
        let data = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| {
                assert!(c > 0, "uncovered voxel in overlap assembly");
                (s / c as f64) as f32
            })
            .collect();
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_positions_per_axis_for_64_32_16() {
        let pos = sliding_positions([64, 64, 64], [32, 32, 32], 16).unwrap();
        assert_eq!(pos.len(), 27);
        let mut xs: Vec<usize> = pos.iter().map(|p| p[0]).collect();
        xs.sort_unstable();
        xs.dedup();
        assert_eq!(xs, vec![0, 16, 32]);
    }

    #[test]
    fn full_size_patch_is_a_single_origin_position() {
        let pos = sliding_positions([32, 32, 32], [32, 32, 32], 7).unwrap();
        assert_eq!(pos, vec![[0, 0, 0]]);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        assert!(matches!(
            sliding_positions([16, 16, 16], [32, 16, 16], 8),
            Err(IoError::PatchTooLarge { .. })
        ));
        assert!(matches!(
            sliding_positions([16, 16, 16], [8, 8, 8], 0),
            Err(IoError::ZeroStride)
        ));
    }

    #[test]
    fn random_grids_cover_every_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let volume = [
                rng.gen_range(4..20),
                rng.gen_range(4..20),
                rng.gen_range(4..20),
            ];
            let patch = [
                rng.gen_range(2..=volume[0]),
                rng.gen_range(2..=volume[1]),
                rng.gen_range(2..=volume[2]),
            ];
            let stride = rng.gen_range(1..8);
            let positions = sliding_positions(volume, patch, stride).unwrap();
            let mut covered = vec![false; volume[0] * volume[1] * volume[2]];
            for p in &positions {
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            covered[((p[0] + x) * volume[1] + p[1] + y) * volume[2] + p[2] + z] =
                                true;
                        }
                    }
                }
            }
            assert!(
                covered.iter().all(|&c| c),
                "gap with volume {volume:?} patch {patch:?} stride {stride}"
            );
        }
    }

    #[test]
    fn constant_patches_assemble_to_a_constant() {
        let volume = [10, 9, 8];
        let patch = [4, 4, 4];
        let positions = sliding_positions(volume, patch, 3).unwrap();
        let mut acc = OverlapAccumulator::new(volume, [1.0; 3]);
        let values = vec![0.625f32; 64];
        for p in positions {
            acc.add_patch(p, patch, &values);
        }
        let out = acc.finish();
        assert!(out.data.iter().all(|&v| v == 0.625));
    }

    #[test]
    fn extract_matches_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Volume::new(
            [5, 6, 7],
            (0..5 * 6 * 7).map(|_| rng.gen::<f32>()).collect(),
        );
        let got = extract_patch(&v, [1, 2, 3], [3, 2, 4]);
        let mut i = 0;
        for x in 0..3 {
            for y in 0..2 {
                for z in 0..4 {
                    let idx = ((1 + x) * 6 + 2 + y) * 7 + 3 + z;
                    assert_eq!(got[i], v.data[idx]);
                    i += 1;
                }
            }
        }
    }
}
