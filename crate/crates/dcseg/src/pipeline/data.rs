//! In-memory dataset and patch sampling.

use super::PipelineError;
use crate::io::{read_mask, read_volume, Manifest, Split, Volume};
use crate::metrics::BinaryMask;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub name: String,
    pub image: Volume,
    pub label: Option<BinaryMask>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub labeled: Vec<LoadedCase>,
    pub unlabeled: Vec<LoadedCase>,
    pub val: Vec<LoadedCase>,
    pub test: Vec<LoadedCase>,
}

impl Dataset {
    /// Load every volume referenced by a manifest into memory (paths
    /// resolved relative to the manifest's directory).
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset, PipelineError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base)
    }

    /// Build a phantom dataset directly in memory. Uses the same
    /// per-volume seed derivation as the on-disk generator, so the
    /// volumes are identical to what `generate_dataset` would write.
    pub fn synthesize(
        cfg: &crate::io::PhantomConfig,
        counts: crate::io::SplitCounts,
        seed: u64,
    ) -> Result<Dataset, PipelineError> {
        use crate::io::generate_volume;
        let mut ds = Dataset::default();
        for (split, count) in [
            (Split::LabeledTrain, counts.labeled_train),
            (Split::UnlabeledTrain, counts.unlabeled_train),
            (Split::Val, counts.val),
            (Split::Test, counts.test),
        ] {
            for i in 0..count {
                let vseed = crate::io::phantom_volume_seed(seed, split, i);
                let (image, mask) = generate_volume(cfg, vseed)?;
                let label = split.labeled().then_some(mask);
                let case = LoadedCase {
                    name: format!("{}_{i:03}", split.name()),
                    image,
                    label,
                };
                match split {
                    Split::LabeledTrain => ds.labeled.push(case),
                    Split::UnlabeledTrain => ds.unlabeled.push(case),
                    Split::Val => ds.val.push(case),
                    Split::Test => ds.test.push(case),
                }
            }
        }
        Ok(ds)
    }

    pub fn from_manifest(manifest: &Manifest, base: &Path) -> Result<Dataset, PipelineError> {
        let mut ds = Dataset::default();
        for split in Split::ALL {
            for entry in manifest.entries(split) {
                let image = read_volume(base.join(&entry.image))?;
                let label = match &entry.label {
                    Some(l) => Some(read_mask(base.join(l))?),
                    None => None,
                };
                let case = LoadedCase {
                    name: entry.image.display().to_string(),
                    image,
                    label,
                };
                match split {
                    Split::LabeledTrain => ds.labeled.push(case),
                    Split::UnlabeledTrain => ds.unlabeled.push(case),
                    Split::Val => ds.val.push(case),
                    Split::Test => ds.test.push(case),
                }
            }
        }
        if ds.labeled.is_empty() || ds.val.is_empty() {
            return Err(PipelineError::Config(
                "dataset needs at least one labeled training case and one validation case".into(),
            ));
        }
        Ok(ds)
    }
}

fn patch_to_tensor<E: Element>(data: &[f32], patch: usize) -> Tensor<E> {
    Tensor::from_vec(
        vec![1, 1, patch, patch, patch],
        data.iter().map(|&v| E::from_f64(v as f64)).collect(),
    )
    .expect("patch buffer matches shape")
}

fn extract_cube(v: &Volume, corner: [usize; 3], patch: usize) -> Vec<f32> {
    crate::io::extract_patch(v, corner, [patch; 3])
}

fn extract_label_cube(m: &BinaryMask, corner: [usize; 3], patch: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(patch * patch * patch);
    for x in 0..patch {
        for y in 0..patch {
            let row = ((corner[0] + x) * m.dims[1] + corner[1] + y) * m.dims[2] + corner[2];
            out.extend(m.data[row..row + patch].iter().map(|&b| f32::from(b)));
        }
    }
    out
}

fn uniform_corner(dims: [usize; 3], patch: usize, rng: &mut ChaCha8Rng) -> [usize; 3] {
    let mut c = [0usize; 3];
    for a in 0..3 {
        c[a] = rng.gen_range(0..=dims[a] - patch);
    }
    c
}

/// Corner that keeps the given voxel inside the patch, uniform over
/// the feasible range.
fn corner_containing(
    voxel: [usize; 3],
    dims: [usize; 3],
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> [usize; 3] {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let lo = voxel[a].saturating_sub(patch - 1).min(dims[a] - patch);
        let hi = voxel[a].min(dims[a] - patch);
        c[a] = rng.gen_range(lo..=hi);
    }
    c
}

/// One labeled training example: image and label cubes, with the
/// configured probability of steering toward a lesion voxel.
pub fn sample_labeled_patch<E: Element>(
    case: &LoadedCase,
    patch: usize,
    lesion_bias: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<E>, Tensor<E>), PipelineError> {
    let label = case
        .label
        .as_ref()
        .ok_or_else(|| PipelineError::Config(format!("case {} has no label", case.name)))?;
    let dims = case.image.dims;
    check_patch(dims, patch)?;
    let corner = if rng.gen::<f64>() < lesion_bias {
        let fg: Vec<usize> = label
            .data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        if fg.is_empty() {
            uniform_corner(dims, patch, rng)
        } else {
            let flat = fg[rng.gen_range(0..fg.len())];
            let voxel = [
                flat / (dims[1] * dims[2]),
                (flat / dims[2]) % dims[1],
                flat % dims[2],
            ];
            corner_containing(voxel, dims, patch, rng)
        }
    } else {
        uniform_corner(dims, patch, rng)
    };
    let image = extract_cube(&case.image, corner, patch);
    let target = extract_label_cube(label, corner, patch);
    Ok((patch_to_tensor(&image, patch), patch_to_tensor(&target, patch)))
}

/// One unlabeled example: a uniformly placed image cube.
pub fn sample_unlabeled_patch<E: Element>(
    case: &LoadedCase,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>, PipelineError> {
    let dims = case.image.dims;
    check_patch(dims, patch)?;
    let corner = uniform_corner(dims, patch, rng);
    Ok(patch_to_tensor(&extract_cube(&case.image, corner, patch), patch))
}

fn check_patch(dims: [usize; 3], patch: usize) -> Result<(), PipelineError> {
    if dims.iter().any(|&d| d < patch) {
        return Err(PipelineError::Config(format!(
            "volume dims {dims:?} are smaller than the {patch}^3 patch"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_dataset, PhantomConfig, SplitCounts};
    use rand::SeedableRng;

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            extent: 16,
            ..PhantomConfig::default()
        };
        let counts = SplitCounts {
            labeled_train: 2,
            unlabeled_train: 2,
            val: 1,
            test: 1,
        };
        generate_dataset(&cfg, counts, 3, dir.path()).unwrap();
        let ds = Dataset::load(dir.path().join("manifest.txt")).unwrap();
        (dir, ds)
    }

    #[test]
    fn loads_all_splits_with_labels_where_expected() {
        let (_dir, ds) = tiny_dataset();
        assert_eq!(ds.labeled.len(), 2);
        assert_eq!(ds.unlabeled.len(), 2);
        assert!(ds.labeled.iter().all(|c| c.label.is_some()));
        assert!(ds.unlabeled.iter().all(|c| c.label.is_none()));
        assert!(ds.val[0].label.is_some());
        assert!(ds.test[0].label.is_some());
    }

    #[test]
    fn lesion_biased_patches_hit_foreground() {
        let (_dir, ds) = tiny_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let case = &ds.labeled[0];
        // With bias 1.0 every patch must contain at least one lesion
        // voxel (the case has nonempty foreground by construction).
        for _ in 0..20 {
            let (_, y) = sample_labeled_patch::<f64>(case, 8, 1.0, &mut rng).unwrap();
            assert!(y.data().iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (_dir, ds) = tiny_dataset();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = sample_labeled_patch::<f32>(&ds.labeled[0], 8, 0.5, &mut rng).unwrap();
            (x.data().to_vec(), y.data().to_vec())
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let (_dir, ds) = tiny_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_unlabeled_patch::<f32>(&ds.unlabeled[0], 64, &mut rng).is_err());
    }
}
