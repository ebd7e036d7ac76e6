//! Synthetic phantom volumes with exactly known segmentations.
//!
//! Each phantom is a union of randomly rotated, boundary-perturbed
//! ellipsoid blobs on a flat background. The label is the exact
//! indicator of the generative region; the *image* then gets smoothed
//! edges, a smooth bias field, and additive noise, so the observable
//! lesion boundary is genuinely ambiguous while the ground truth stays
//! exact.

use super::volume::{write_mask, write_volume, Volume};
use super::{IoError, Manifest, Split};
use crate::metrics::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    /// Cubic volume edge in voxels.
    pub extent: usize,
    /// Inclusive range of lesions per volume.
    pub lesion_count: (usize, usize),
    /// Inclusive range of ellipsoid blobs per lesion.
    pub blobs_per_lesion: (usize, usize),
    /// Ellipsoid semi-axes as a fraction of the extent.
    pub radius_frac: (f64, f64),
    /// Amplitude of the direction-dependent boundary perturbation.
    pub boundary_amp: f64,
    /// Background intensity.
    pub background: f32,
    /// Added intensity inside lesions.
    pub contrast: f32,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f32,
    /// Amplitude of the smooth multiplicative-free bias field.
    pub bias_amp: f32,
    /// Box-blur passes applied to the lesion indicator before it is
    /// added to the image (softens the observable edge).
    pub edge_smoothing: usize,
    /// Acceptable foreground fraction; volumes outside are resampled.
    pub fg_range: (f64, f64),
    pub spacing: [f32; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            extent: 32,
            lesion_count: (1, 3),
            blobs_per_lesion: (1, 3),
            radius_frac: (0.10, 0.22),
            boundary_amp: 0.25,
            background: 0.20,
            contrast: 0.35,
            noise_sigma: 0.10,
            bias_amp: 0.08,
            edge_smoothing: 2,
            fg_range: (0.005, 0.30),
            spacing: [1.0; 3],
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<(), IoError> {
        if self.extent < 8 {
            return Err(IoError::InvalidConfig("extent must be >= 8".into()));
        }
        if self.lesion_count.0 == 0 || self.lesion_count.0 > self.lesion_count.1 {
            return Err(IoError::InvalidConfig("bad lesion_count range".into()));
        }
        if self.radius_frac.0 <= 0.0 || self.radius_frac.0 > self.radius_frac.1 {
            return Err(IoError::InvalidConfig("bad radius_frac range".into()));
        }
        if self.fg_range.0 <= 0.0 || self.fg_range.0 >= self.fg_range.1 {
            return Err(IoError::InvalidConfig("bad fg_range".into()));
        }
        Ok(())
    }
}

struct Blob {
    center: [f64; 3],
    semi_axes: [f64; 3],
    rot: [[f64; 3]; 3],
    // Direction-dependent radial modulation: sum of a few sinusoids.
    wobble: Vec<(f64, f64, [f64; 3], f64)>, // (amplitude, frequency, direction, phase)
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm == 0.0 {
            return true;
        }
        let u = [d[0] / norm, d[1] / norm, d[2] / norm];
        let mut q = 0.0;
        for i in 0..3 {
            let y = self.rot[i][0] * d[0] + self.rot[i][1] * d[1] + self.rot[i][2] * d[2];
            let s = y / self.semi_axes[i];
            q += s * s;
        }
        let mut radius = 1.0;
        for &(a, f, dir, phase) in &self.wobble {
            let t = dir[0] * u[0] + dir[1] * u[1] + dir[2] * u[2];
            radius += a * (f * t + phase).sin();
        }
        q.sqrt() <= radius.max(0.2)
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Rotation from a uniform random unit quaternion.
    let q = loop {
        let q = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
        if n > 1e-3 && n <= 1.0 {
            break [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    };
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn sample_blobs(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let lesions = rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1);
    let mut blobs = Vec::new();
    for _ in 0..lesions {
        let lesion_center = [
            rng.gen_range(0.25..0.75),
            rng.gen_range(0.25..0.75),
            rng.gen_range(0.25..0.75),
        ];
        let n_blobs = rng.gen_range(cfg.blobs_per_lesion.0..=cfg.blobs_per_lesion.1);
        for _ in 0..n_blobs {
            let center = [
                lesion_center[0] + rng.gen_range(-0.06..0.06),
                lesion_center[1] + rng.gen_range(-0.06..0.06),
                lesion_center[2] + rng.gen_range(-0.06..0.06),
            ];
            let semi_axes = [
                rng.gen_range(cfg.radius_frac.0..cfg.radius_frac.1),
                rng.gen_range(cfg.radius_frac.0..cfg.radius_frac.1),
                rng.gen_range(cfg.radius_frac.0..cfg.radius_frac.1),
            ];
            let rot = random_rotation(rng);
            let wobble = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.0..cfg.boundary_amp / 3.0),
                        rng.gen_range(2.0..6.0),
                        random_unit(rng),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            blobs.push(Blob {
                center,
                semi_axes,
                rot,
                wobble,
            });
        }
    }
    blobs
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; both uniforms drawn even though one output is used,
    // keeping the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Separable 3-tap box blur with edge clamping.
fn box_blur(data: &mut Vec<f32>, dims: [usize; 3]) {
    let idx = |x: usize, y: usize, z: usize| (x * dims[1] + y) * dims[2] + z;
    let mut tmp = data.clone();
    // Axis 0.
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let lo = x.saturating_sub(1);
                let hi = (x + 1).min(dims[0] - 1);
                tmp[idx(x, y, z)] = (data[idx(lo, y, z)] + data[idx(x, y, z)] + data[idx(hi, y, z)]) / 3.0;
            }
        }
    }
    // Axis 1.
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            let lo = y.saturating_sub(1);
            let hi = (y + 1).min(dims[1] - 1);
            for z in 0..dims[2] {
                data[idx(x, y, z)] = (tmp[idx(x, lo, z)] + tmp[idx(x, y, z)] + tmp[idx(x, hi, z)]) / 3.0;
            }
        }
    }
    // Axis 2.
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let lo = z.saturating_sub(1);
                let hi = (z + 1).min(dims[2] - 1);
                tmp[idx(x, y, z)] = (data[idx(x, y, lo)] + data[idx(x, y, z)] + data[idx(x, y, hi)]) / 3.0;
            }
        }
    }
    *data = tmp;
}

/// Generate one phantom. Deterministic in `(cfg, seed)`.
pub fn generate_volume(cfg: &PhantomConfig, seed: u64) -> Result<(Volume, BinaryMask), IoError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = cfg.extent;
    let dims = [e, e, e];
    let n = e * e * e;

    let mut label = vec![false; n];
    for attempt in 0.. {
        if attempt >= 64 {
            return Err(IoError::InvalidConfig(format!(
                "could not reach foreground fraction {:?} in 64 attempts",
                cfg.fg_range
            )));
        }
        let blobs = sample_blobs(cfg, &mut rng);
        let mut count = 0usize;
        for x in 0..e {
            for y in 0..e {
                for z in 0..e {
                    let p = [
                        (x as f64 + 0.5) / e as f64,
                        (y as f64 + 0.5) / e as f64,
                        (z as f64 + 0.5) / e as f64,
                    ];
                    let inside = blobs.iter().any(|b| b.contains(p));
                    label[(x * e + y) * e + z] = inside;
                    count += usize::from(inside);
                }
            }
        }
        let frac = count as f64 / n as f64;
        if frac >= cfg.fg_range.0 && frac <= cfg.fg_range.1 {
            break;
        }
    }

    // Image: smoothed indicator + bias field + noise on the background.
    let mut soft: Vec<f32> = label.iter().map(|&b| f32::from(b)).collect();
    for _ in 0..cfg.edge_smoothing {
        box_blur(&mut soft, dims);
    }
    let grad = random_unit(&mut rng);
    let wave_dir = random_unit(&mut rng);
    let wave_freq = rng.gen_range(3.0..7.0);
    let wave_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut data = Vec::with_capacity(n);
    for x in 0..e {
        for y in 0..e {
            for z in 0..e {
                let p = [
                    (x as f64 + 0.5) / e as f64 - 0.5,
                    (y as f64 + 0.5) / e as f64 - 0.5,
                    (z as f64 + 0.5) / e as f64 - 0.5,
                ];
                let ramp = grad[0] * p[0] + grad[1] * p[1] + grad[2] * p[2];
                let wave =
                    (wave_freq * (wave_dir[0] * p[0] + wave_dir[1] * p[1] + wave_dir[2] * p[2])
                        + wave_phase)
                        .sin();
                let bias = cfg.bias_amp * (ramp + 0.5 * wave) as f32;
                let noise = cfg.noise_sigma * gaussian(&mut rng) as f32;
                let v = cfg.background
                    + cfg.contrast * soft[(x * e + y) * e + z]
                    + bias
                    + noise;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }

    let spacing64 = [
        cfg.spacing[0] as f64,
        cfg.spacing[1] as f64,
        cfg.spacing[2] as f64,
    ];
    let volume = Volume {
        dims,
        spacing: cfg.spacing,
        data,
    };
    let mask = BinaryMask::with_spacing(dims, spacing64, label).expect("dims match");
    Ok((volume, mask))
}

#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub labeled_train: usize,
    pub unlabeled_train: usize,
    pub val: usize,
    pub test: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-volume seed: a fixed mix of the dataset seed, split, and index,
/// so adding volumes to one split never changes another split's data.
pub(crate) fn volume_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let split_tag = match split {
        Split::LabeledTrain => 1u64,
        Split::UnlabeledTrain => 2,
        Split::Val => 3,
        Split::Test => 4,
    };
    splitmix(dataset_seed ^ splitmix(split_tag << 32 | index as u64))
}

/// Generate a dataset on disk and return its manifest (also written to
/// `<out_dir>/manifest.txt`, with paths relative to `out_dir`).
pub fn generate_dataset(
    cfg: &PhantomConfig,
    counts: SplitCounts,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, IoError> {
    cfg.validate()?;
    if counts.labeled_train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(IoError::InvalidConfig(
            "labeled_train, val and test each need at least one volume".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    let images = out_dir.join("images");
    let labels = out_dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| IoError::File {
            path: d.display().to_string(),
            source: e,
        })?;
    }

    let mut manifest = Manifest::new(seed);
    manifest
        .notes
        .push(format!("phantom extent {} voxels", cfg.extent));
    for (split, count) in [
        (Split::LabeledTrain, counts.labeled_train),
        (Split::UnlabeledTrain, counts.unlabeled_train),
        (Split::Val, counts.val),
        (Split::Test, counts.test),
    ] {
        for i in 0..count {
            let (volume, mask) = generate_volume(cfg, volume_seed(seed, split, i))?;
            let image_rel = format!("images/{}_{i:03}.vol", split.name());
            write_volume(out_dir.join(&image_rel), &volume)?;
            let label_rel = if split.labeled() {
                let rel = format!("labels/{}_{i:03}.vol", split.name());
                write_mask(out_dir.join(&rel), &mask)?;
                Some(rel.into())
            } else {
                None
            };
            manifest.push(split, image_rel.into(), label_rel)?;
        }
    }
    manifest.validate()?;
    manifest.write(out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
