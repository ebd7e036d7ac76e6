//! Feature perturbations for the auxiliary decoders.
//!
//! Seven kinds, one bound to each auxiliary decoder index for the
//! lifetime of a run:
//!
//! | kind             | effect on the bottleneck `z`                        |
//! |------------------|-----------------------------------------------------|
//! | `FeatureNoise`   | `z * (1 + N)`, `N` uniform in `[-r, r]`             |
//! | `FeatureDropout` | drop the most-activated spatial sites (rank cutoff at a random quantile) |
//! | `ObjectMasking`  | keep sites where the main prediction is foreground  |
//! | `ContextMasking` | complement of the object mask                       |
//! | `GuidedCutout`   | zero a random box inside each predicted component   |
//! | `IntermediateVat`| add the adversarial direction `r_adv`               |
//! | `RandomDropout`  | drop whole channels at a fixed rate                 |
//!
//! Masks and noise are built from detached values (the main prediction
//! never receives gradients through them) and enter the graph as
//! constants; masked kinds satisfy `z_tilde == z * M` with `M` binary.
//! Everything is a pure function of `(kind, z, context seed)`.

use crate::net::NetError;
use crate::tensor::{Dims5, Element, Graph, NodeId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("bottleneck must be 5-D, got shape {0:?}")]
    NotFiveD(Vec<usize>),
    #[error("prediction of {pred:?} voxels does not downsample to bottleneck spatial {z:?}")]
    DownsampleMismatch { pred: [usize; 3], z: [usize; 3] },
    #[error("prediction buffer holds {got} values, expected batch {batch} x {per} voxels")]
    PredLength { got: usize, batch: usize, per: usize },
    #[error("the adversarial perturbation needs a decoder function")]
    VatNeedsDecoder,
    #[error("invalid adversarial-search parameter: {0}")]
    BadVatParams(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The seven perturbation kinds, in decoder-binding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    FeatureNoise,
    FeatureDropout,
    ObjectMasking,
    ContextMasking,
    GuidedCutout,
    IntermediateVat,
    RandomDropout,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        PerturbationKind::FeatureNoise,
        PerturbationKind::FeatureDropout,
        PerturbationKind::ObjectMasking,
        PerturbationKind::ContextMasking,
        PerturbationKind::GuidedCutout,
        PerturbationKind::IntermediateVat,
        PerturbationKind::RandomDropout,
    ];

    /// The kind bound to auxiliary decoder `k`.
    pub fn for_decoder(k: usize) -> PerturbationKind {
        Self::ALL[k % Self::ALL.len()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::FeatureNoise => "feature_noise",
            PerturbationKind::FeatureDropout => "feature_dropout",
            PerturbationKind::ObjectMasking => "object_masking",
            PerturbationKind::ContextMasking => "context_masking",
            PerturbationKind::GuidedCutout => "guided_cutout",
            PerturbationKind::IntermediateVat => "intermediate_vat",
            PerturbationKind::RandomDropout => "random_dropout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbHyperparams {
    /// Noise range `r` for `FeatureNoise`.
    pub noise_range: f64,
    /// Quantile range for the `FeatureDropout` cutoff.
    pub dropout_quantile: (f64, f64),
    /// Foreground threshold on the main prediction.
    pub object_threshold: f64,
    /// Cutout box side as a fraction of the component bounding box.
    pub cutout_frac: (f64, f64),
    /// Channel drop rate for `RandomDropout`.
    pub random_dropout_rate: f64,
    pub vat_xi: f64,
    pub vat_eps: f64,
    pub vat_iters: usize,
}

impl Default for PerturbHyperparams {
    fn default() -> Self {
        PerturbHyperparams {
            noise_range: 0.3,
            dropout_quantile: (0.6, 0.9),
            object_threshold: 0.5,
            cutout_frac: (0.25, 0.50),
            random_dropout_rate: 0.5,
            vat_xi: 1e-6,
            vat_eps: 2.0,
            vat_iters: 1,
        }
    }
}

/// Detached inputs of a perturbation: the main prediction (read-only,
/// used only to build masks), hyperparameters, and the seed that makes
/// the draw reproducible.
pub struct PerturbContext<'a> {
    /// Main-decoder probabilities, length `batch * prod(pred_spatial)`.
    pub main_pred: &'a [f64],
    pub pred_spatial: [usize; 3],
    pub params: &'a PerturbHyperparams,
    pub seed: u64,
}

/// Decoder evaluation used by the adversarial search: builds the
/// decoder forward for a feature node inside the given graph.
pub type DecoderFn<'a, E> = dyn FnMut(&mut Graph<E>, NodeId) -> Result<NodeId, NetError> + 'a;

/// The concrete, detached effect a perturbation had on the feature:
/// enough to re-apply it exactly on a rebuilt graph (replayed training
/// steps, finite-difference checks of the full loss).
#[derive(Debug, Clone)]
pub enum AppliedPerturbation<E: Element> {
    /// `z * gain` (feature noise).
    Multiply(Tensor<E>),
    /// `z * mask`, mask binary (dropouts, object/context, cutout).
    Mask(Tensor<E>),
    /// `z + offset` (adversarial direction).
    Add(Tensor<E>),
    /// Degenerate fallback: the feature passed through unchanged.
    Identity,
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome<E: Element> {
    pub node: NodeId,
    /// Degenerate mask: the identity fallback was substituted and this
    /// decoder's consistency term should be skipped this step.
    pub skip_loss: bool,
    /// The adversarial search found a zero gradient.
    pub zero_gradient: bool,
    pub applied: AppliedPerturbation<E>,
}

impl<E: Element> PerturbOutcome<E> {
    fn plain(node: NodeId, applied: AppliedPerturbation<E>) -> Self {
        PerturbOutcome {
            node,
            skip_loss: false,
            zero_gradient: false,
            applied,
        }
    }
}

/// Re-apply a captured perturbation to a (possibly rebuilt) feature
/// node.
pub fn apply_frozen<E: Element>(
    g: &mut Graph<E>,
    z: NodeId,
    applied: &AppliedPerturbation<E>,
) -> Result<NodeId, PerturbError> {
    Ok(match applied {
        AppliedPerturbation::Multiply(gain) => {
            let gain = g.constant(gain.clone());
            g.mul(z, gain)?
        }
        AppliedPerturbation::Mask(mask) => {
            let mask = g.constant(mask.clone());
            g.mask_select(z, mask)?
        }
        AppliedPerturbation::Add(offset) => {
            let offset = g.constant(offset.clone());
            g.add(z, offset)?
        }
        AppliedPerturbation::Identity => z,
    })
}

/// Apply `kind` to the bottleneck node `z`. `decoder` is only needed
/// for [`PerturbationKind::IntermediateVat`].
pub fn perturb<E: Element>(
    kind: PerturbationKind,
    g: &mut Graph<E>,
    z: NodeId,
    ctx: &PerturbContext<'_>,
    mut decoder: Option<&mut DecoderFn<'_, E>>,
) -> Result<PerturbOutcome<E>, PerturbError> {
    let zd = Dims5::from_shape(g.shape(z)).ok_or_else(|| NotFiveD(g.shape(z)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    match kind {
        PerturbationKind::FeatureNoise => {
            let r = ctx.params.noise_range;
            let gain: Vec<E> = (0..zd.numel())
                .map(|_| {
                    let n = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
                    E::from_f64(1.0 + n)
                })
                .collect();
            let gain = Tensor::from_vec(zd.shape(), gain)?;
            let node = {
                let c = g.constant(gain.clone());
                g.mul(z, c)?
            };
            Ok(PerturbOutcome::plain(
                node,
                AppliedPerturbation::Multiply(gain),
            ))
        }
        PerturbationKind::FeatureDropout => {
            let (lo, hi) = ctx.params.dropout_quantile;
            let quantile = rng.gen_range(lo..hi);
            let mask = feature_dropout_mask(g.value(z), zd, quantile);
            apply_spatial_mask(g, z, zd, &mask)
        }
        PerturbationKind::ObjectMasking => {
            let m = object_mask(ctx, zd)?;
            apply_spatial_mask(g, z, zd, &m)
        }
        PerturbationKind::ContextMasking => {
            let mut m = object_mask(ctx, zd)?;
            for v in m.iter_mut() {
                *v = !*v;
            }
            apply_spatial_mask(g, z, zd, &m)
        }
        PerturbationKind::GuidedCutout => {
            let obj = object_mask(ctx, zd)?;
            let m = cutout_mask(&obj, zd, ctx.params.cutout_frac, &mut rng);
            apply_spatial_mask(g, z, zd, &m)
        }
        PerturbationKind::IntermediateVat => {
            let decoder = decoder.as_deref_mut().ok_or(PerturbError::VatNeedsDecoder)?;
            let z_val = g.value(z).clone();
            // Reference output of this decoder on the clean feature.
            let p_ref = {
                let mut scratch = Graph::<E>::new();
                let feat = scratch.input("z", z_val.clone());
                let pred = decoder(&mut scratch, feat)?;
                scratch.value(pred).clone()
            };
            let vat = vat_direction(
                decoder,
                &z_val,
                &p_ref,
                ctx.params.vat_xi,
                ctx.params.vat_eps,
                ctx.params.vat_iters,
                &mut rng,
            )?;
            let node = {
                let r = g.constant(vat.direction.clone());
                g.add(z, r)?
            };
            Ok(PerturbOutcome {
                node,
                skip_loss: false,
                zero_gradient: vat.zero_gradient,
                applied: AppliedPerturbation::Add(vat.direction),
            })
        }
        PerturbationKind::RandomDropout => {
            let rate = ctx.params.random_dropout_rate;
            let channel_mask: Vec<bool> = (0..zd.n * zd.c)
                .map(|_| rng.gen::<f64>() >= rate)
                .collect();
            let sp = zd.spatial_len();
            let data: Vec<E> = channel_mask
                .iter()
                .flat_map(|&keep| std::iter::repeat(if keep { E::ONE } else { E::ZERO }).take(sp))
                .collect();
            let mask = Tensor::from_vec(zd.shape(), data)?;
            let node = {
                let m = g.constant(mask.clone());
                g.mask_select(z, m)?
            };
            Ok(PerturbOutcome::plain(node, AppliedPerturbation::Mask(mask)))
        }
    }
}

#[allow(non_snake_case)]
fn NotFiveD(shape: &[usize]) -> PerturbError {
    PerturbError::NotFiveD(shape.to_vec())
}

/// Broadcast a per-sample spatial mask over channels and multiply. An
/// all-false mask falls back to the identity and flags the loss skip.
fn apply_spatial_mask<E: Element>(
    g: &mut Graph<E>,
    z: NodeId,
    zd: Dims5,
    mask: &[bool],
) -> Result<PerturbOutcome<E>, PerturbError> {
    debug_assert_eq!(mask.len(), zd.n * zd.spatial_len());
    if mask.iter().all(|&m| !m) {
        return Ok(PerturbOutcome {
            node: z,
            skip_loss: true,
            zero_gradient: false,
            applied: AppliedPerturbation::Identity,
        });
    }
    let sp = zd.spatial_len();
    let mut data = Vec::with_capacity(zd.numel());
    for n in 0..zd.n {
        let per_sample = &mask[n * sp..(n + 1) * sp];
        for _ in 0..zd.c {
            data.extend(per_sample.iter().map(|&m| if m { E::ONE } else { E::ZERO }));
        }
    }
    let mask = Tensor::from_vec(zd.shape(), data)?;
    let node = {
        let m = g.constant(mask.clone());
        g.mask_select(z, m)?
    };
    Ok(PerturbOutcome::plain(node, AppliedPerturbation::Mask(mask)))
}

/// Rank-based spatial dropout mask: mean |activation| over channels,
/// drop the top `(1 - quantile)` fraction of sites per sample. Keeping
/// at-or-below the cutoff makes the degenerate constant-attention case
/// an identity rather than a wipeout.
fn feature_dropout_mask<E: Element>(z: &Tensor<E>, zd: Dims5, quantile: f64) -> Vec<bool> {
    let sp = zd.spatial_len();
    let mut mask = vec![true; zd.n * sp];
    for n in 0..zd.n {
        let mut attention = vec![0.0f64; sp];
        for c in 0..zd.c {
            let base = (n * zd.c + c) * sp;
            for (i, slot) in attention.iter_mut().enumerate() {
                *slot += z.data()[base + i].to_f64().abs();
            }
        }
        let drop_count = ((1.0 - quantile) * sp as f64).floor() as usize;
        if drop_count == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..sp).collect();
        order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
        for &site in order.iter().take(drop_count) {
            mask[n * sp + site] = false;
        }
    }
    mask
}

/// Threshold the main prediction and max-pool it down to the
/// bottleneck resolution: a pooled site is foreground if any covered
/// prediction voxel is.
fn object_mask(ctx: &PerturbContext<'_>, zd: Dims5) -> Result<Vec<bool>, PerturbError> {
    let pd = ctx.pred_spatial;
    let zs = zd.spatial();
    let per = pd[0] * pd[1] * pd[2];
    if ctx.main_pred.len() != zd.n * per {
        return Err(PerturbError::PredLength {
            got: ctx.main_pred.len(),
            batch: zd.n,
            per,
        });
    }
    let mut factor = [0usize; 3];
    for a in 0..3 {
        if zs[a] == 0 || pd[a] % zs[a] != 0 {
            return Err(PerturbError::DownsampleMismatch { pred: pd, z: zs });
        }
        factor[a] = pd[a] / zs[a];
    }
    let sp = zd.spatial_len();
    let mut mask = vec![false; zd.n * sp];
    for n in 0..zd.n {
        let pred = &ctx.main_pred[n * per..(n + 1) * per];
        for zx in 0..zs[0] {
            for zy in 0..zs[1] {
                for zz in 0..zs[2] {
                    let mut any = false;
                    'pool: for dx in 0..factor[0] {
                        for dy in 0..factor[1] {
                            for dz in 0..factor[2] {
                                let idx = ((zx * factor[0] + dx) * pd[1] + zy * factor[1] + dy)
                                    * pd[2]
                                    + zz * factor[2]
                                    + dz;
                                if pred[idx] > ctx.params.object_threshold {
                                    any = true;
                                    break 'pool;
                                }
                            }
                        }
                    }
                    mask[n * sp + (zx * zs[1] + zy) * zs[2] + zz] = any;
                }
            }
        }
    }
    Ok(mask)
}

/// Zero one random box inside the bounding box of each 6-connected
/// foreground component; box sides are a random fraction of the
/// component's bounding box per axis.
fn cutout_mask(
    object: &[bool],
    zd: Dims5,
    frac: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let zs = zd.spatial();
    let sp = zd.spatial_len();
    let mut mask = vec![true; zd.n * sp];
    for n in 0..zd.n {
        let sample = &object[n * sp..(n + 1) * sp];
        for (lo, hi) in component_bounding_boxes(sample, zs) {
            let mut corner = [0usize; 3];
            let mut size = [0usize; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a] + 1;
                let f = rng.gen_range(frac.0..frac.1);
                size[a] = ((extent as f64 * f).round() as usize).clamp(1, extent);
                corner[a] = lo[a] + rng.gen_range(0..=extent - size[a]);
            }
            for x in corner[0]..corner[0] + size[0] {
                for y in corner[1]..corner[1] + size[1] {
                    for zc in corner[2]..corner[2] + size[2] {
                        mask[n * sp + (x * zs[1] + y) * zs[2] + zc] = false;
                    }
                }
            }
        }
    }
    mask
}

/// Bounding boxes of 6-connected foreground components, in scan order.
fn component_bounding_boxes(
    mask: &[bool],
    dims: [usize; 3],
) -> Vec<([usize; 3], [usize; 3])> {
    let idx = |x: usize, y: usize, z: usize| (x * dims[1] + y) * dims[2] + z;
    let mut seen = vec![false; mask.len()];
    let mut boxes = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let start = idx(x, y, z);
                if !mask[start] || seen[start] {
                    continue;
                }
                let mut lo = [x, y, z];
                let mut hi = [x, y, z];
                let mut queue = vec![[x, y, z]];
                seen[start] = true;
                while let Some(v) = queue.pop() {
                    for a in 0..3 {
                        lo[a] = lo[a].min(v[a]);
                        hi[a] = hi[a].max(v[a]);
                    }
                    let mut push = |w: [usize; 3]| {
                        let i = idx(w[0], w[1], w[2]);
                        if mask[i] && !seen[i] {
                            seen[i] = true;
                            queue.push(w);
                        }
                    };
                    if v[0] > 0 {
                        push([v[0] - 1, v[1], v[2]]);
                    }
                    if v[0] + 1 < dims[0] {
                        push([v[0] + 1, v[1], v[2]]);
                    }
                    if v[1] > 0 {
                        push([v[0], v[1] - 1, v[2]]);
                    }
                    if v[1] + 1 < dims[1] {
                        push([v[0], v[1] + 1, v[2]]);
                    }
                    if v[2] > 0 {
                        push([v[0], v[1], v[2] - 1]);
                    }
                    if v[2] + 1 < dims[2] {
                        push([v[0], v[1], v[2] + 1]);
                    }
                }
                boxes.push((lo, hi));
            }
        }
    }
    boxes
}

#[derive(Debug, Clone)]
pub struct VatResult<E: Element> {
    /// The perturbation to add to the feature, with L2 norm `eps`
    /// (zero when the divergence gradient vanished).
    pub direction: Tensor<E>,
    pub zero_gradient: bool,
}

/// Power-iteration estimate of the feature-space direction that most
/// increases the divergence between `decoder(z)` and `decoder(z + r)`.
///
/// The divergence is the voxelwise binary KL from the reference
/// probabilities to the perturbed ones; its entropy part is constant
/// in `r`, so the inner loss uses the cross-entropy part, which has
/// the same gradient.
pub fn vat_direction<E: Element>(
    decoder: &mut DecoderFn<'_, E>,
    z: &Tensor<E>,
    p_ref: &Tensor<E>,
    xi: f64,
    eps: f64,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VatResult<E>, PerturbError> {
    if eps < 0.0 {
        return Err(PerturbError::BadVatParams(format!("eps must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(VatResult {
            direction: Tensor::zeros(z.shape()),
            zero_gradient: false,
        });
    }
    if xi <= 0.0 || iters == 0 {
        return Err(PerturbError::BadVatParams(format!(
            "xi must be > 0 and iters >= 1, got xi={xi}, iters={iters}"
        )));
    }

    let mut direction: Vec<f64> = (0..z.numel()).map(|_| gaussian(rng)).collect();
    normalize(&mut direction);

    for _ in 0..iters {
        let mut probe = Graph::<E>::new();
        let zc = probe.input("z", z.clone());
        let seed: Vec<E> = direction.iter().map(|&d| E::from_f64(d * xi)).collect();
        let r = probe.param("r", Tensor::from_vec(z.shape().to_vec(), seed)?);
        let zr = probe.add(zc, r)?;
        let pred = decoder(&mut probe, zr)?;

        let p_ref_node = probe.constant(p_ref.clone());
        let ones = probe.constant(Tensor::full(p_ref.shape(), E::ONE));
        let pc = probe.clamp(pred, 1e-7, 1.0 - 1e-7)?;
        let log_p = probe.log(pc)?;
        let one_minus = probe.sub(ones, pc)?;
        let log_np = probe.log(one_minus)?;
        let pos = probe.mul(p_ref_node, log_p)?;
        let ref_neg = probe.sub(ones, p_ref_node)?;
        let neg = probe.mul(ref_neg, log_np)?;
        let ll = probe.add(pos, neg)?;
        let mean_ll = probe.mean(ll)?;
        let loss = probe.scalar_mul(mean_ll, -1.0)?;
        probe.backward(loss)?;

        let grad = match probe.grad(r) {
            Some(t) => t.data().iter().map(|v| v.to_f64()).collect::<Vec<f64>>(),
            None => vec![0.0; z.numel()],
        };
        let norm = l2(&grad);
        if norm == 0.0 {
            return Ok(VatResult {
                direction: Tensor::zeros(z.shape()),
                zero_gradient: true,
            });
        }
        direction = grad;
        normalize(&mut direction);
    }

    let data: Vec<E> = direction.iter().map(|&d| E::from_f64(d * eps)).collect();
    Ok(VatResult {
        direction: Tensor::from_vec(z.shape().to_vec(), data)?,
        zero_gradient: false,
    })
}

/// Mean voxelwise binary KL divergence between two probability maps.
pub fn binary_kl_mean(p_ref: &[f64], p_hat: &[f64]) -> f64 {
    assert_eq!(p_ref.len(), p_hat.len());
    let clamp = |v: f64| v.clamp(1e-7, 1.0 - 1e-7);
    let mut acc = 0.0;
    for (&p, &q) in p_ref.iter().zip(p_hat) {
        let (p, q) = (clamp(p), clamp(q));
        acc += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    }
    acc / p_ref.len() as f64
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = l2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
