//! Invertible spatial transforms on 3D grids.
//!
//! A [`Transform`] is a signed axis permutation (one of the 48 cube
//! symmetries: 6 axis orders x 8 flip masks) optionally followed by a
//! cyclic integer shift per axis. Every transform is a pure permutation
//! of voxels, so `apply(invert(t), apply(t, v))` restores `v` bit for
//! bit. That exactness is what lets a prediction on a transformed input
//! be compared voxelwise against the untransformed prediction.

use rand::Rng;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

const AXIS_LETTERS: [char; 3] = ['X', 'Y', 'Z'];

/// The six axis orders, as `src` arrays: output axis `a` reads input
/// axis `PERMUTATIONS[p][a]`.
const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransformError {
    #[error("transform pool is empty; enable at least one element")]
    EmptyPool,
    #[error("invalid transform token `{0}`: {1}")]
    BadToken(String, String),
    #[error("volume of {got} voxels does not match dims {dims:?}")]
    DimsMismatch { dims: [usize; 3], got: usize },
}

/// An invertible grid transform: `out[v] = in[u]` where
/// `u[src[a]] = wrap(phi_a(v[a]) + shift[src[a]])` and `phi_a` reverses
/// the axis when `flip[a]` is set.
///
/// Shifts are cyclic (wrap-around), which keeps the voxel multiset and
/// the exact inverse; a cropping shift would satisfy neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transform {
    /// Source input axis for each output axis.
    pub src: [usize; 3],
    /// Whether each output axis is reversed.
    pub flip: [bool; 3],
    /// Cyclic shift per *input* axis, applied before permutation.
    pub shift: [i64; 3],
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            src: [0, 1, 2],
            flip: [false; 3],
            shift: [0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Flip a single axis, leaving order and shifts alone.
    pub fn flip_axis(axis: usize) -> Self {
        let mut t = Self::identity();
        t.flip[axis] = true;
        t
    }

    /// Output dims for an input of the given dims.
    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        [dims[self.src[0]], dims[self.src[1]], dims[self.src[2]]]
    }

    /// The transform undoing `self` on any volume.
    pub fn invert(&self) -> Self {
        let mut inv = Transform::identity();
        for a in 0..3 {
            let b = self.src[a];
            inv.src[b] = a;
            inv.flip[b] = self.flip[a];
            inv.shift[a] = if self.flip[a] {
                self.shift[b]
            } else {
                -self.shift[b]
            };
        }
        inv
    }

    /// The transform equivalent to applying `inner` first, then `self`.
    pub fn compose(&self, inner: &Transform) -> Self {
        let (t2, t1) = (self, inner);
        let mut c = Transform::identity();
        for b in 0..3 {
            let mid = t2.src[b];
            c.src[b] = t1.src[mid];
            c.flip[b] = t1.flip[mid] ^ t2.flip[b];
            let folded = if t1.flip[mid] {
                -t2.shift[mid]
            } else {
                t2.shift[mid]
            };
            c.shift[c.src[b]] = t1.shift[c.src[b]] + folded;
        }
        c
    }

    /// Remap one scalar grid. `dst` must have `src_data.len()` capacity;
    /// it is overwritten.
    pub fn apply_slice<T: Copy>(&self, dims: [usize; 3], src_data: &[T], dst: &mut Vec<T>) {
        debug_assert_eq!(src_data.len(), dims[0] * dims[1] * dims[2]);
        let od = self.out_dims(dims);
        dst.clear();
        dst.reserve(src_data.len());
        let mut u = [0usize; 3];
        for v0 in 0..od[0] {
            for v1 in 0..od[1] {
                for v2 in 0..od[2] {
                    let v = [v0, v1, v2];
                    for a in 0..3 {
                        let s = self.src[a];
                        let n = dims[s] as i64;
                        let raw = if self.flip[a] {
                            (od[a] - 1 - v[a]) as i64
                        } else {
                            v[a] as i64
                        };
                        u[s] = (raw + self.shift[s]).rem_euclid(n) as usize;
                    }
                    dst.push(src_data[(u[0] * dims[1] + u[1]) * dims[2] + u[2]]);
                }
            }
        }
    }

    /// All 48 flip-and-permute symmetries of a cube grid (no shifts).
    pub fn cube_symmetries() -> Vec<Transform> {
        let mut out = Vec::with_capacity(48);
        for src in PERMUTATIONS {
            for mask in 0..8u8 {
                out.push(Transform {
                    src,
                    flip: [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0],
                    shift: [0; 3],
                });
            }
        }
        out
    }

    /// Compact log token, e.g. `pXZY;fX;s0,0,0`.
    pub fn token(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p")?;
        for a in 0..3 {
            write!(f, "{}", AXIS_LETTERS[self.src[a]])?;
        }
        write!(f, ";f")?;
        for a in 0..3 {
            if self.flip[a] {
                write!(f, "{}", AXIS_LETTERS[a])?;
            }
        }
        write!(f, ";s{},{},{}", self.shift[0], self.shift[1], self.shift[2])
    }
}

impl FromStr for Transform {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: &str| TransformError::BadToken(s.to_string(), msg.to_string());
        let mut parts = s.split(';');
        let perm = parts.next().ok_or_else(|| bad("missing perm part"))?;
        let flips = parts.next().ok_or_else(|| bad("missing flip part"))?;
        let shifts = parts.next().ok_or_else(|| bad("missing shift part"))?;
        if parts.next().is_some() {
            return Err(bad("too many parts"));
        }

        let axis = |c: char| AXIS_LETTERS.iter().position(|&l| l == c);
        let perm = perm.strip_prefix('p').ok_or_else(|| bad("perm must start with p"))?;
        let mut src = [0usize; 3];
        let chars: Vec<char> = perm.chars().collect();
        if chars.len() != 3 {
            return Err(bad("perm needs exactly three axis letters"));
        }
        let mut seen = [false; 3];
        for (a, &c) in chars.iter().enumerate() {
            let k = axis(c).ok_or_else(|| bad("unknown axis letter"))?;
            if seen[k] {
                return Err(bad("repeated axis in perm"));
            }
            seen[k] = true;
            src[a] = k;
        }

        let flips = flips.strip_prefix('f').ok_or_else(|| bad("flip must start with f"))?;
        let mut flip = [false; 3];
        for c in flips.chars() {
            let k = axis(c).ok_or_else(|| bad("unknown flip axis"))?;
            flip[k] = true;
        }

        let shifts = shifts.strip_prefix('s').ok_or_else(|| bad("shift must start with s"))?;
        let nums: Vec<&str> = shifts.split(',').collect();
        if nums.len() != 3 {
            return Err(bad("shift needs three comma-separated integers"));
        }
        let mut shift = [0i64; 3];
        for (i, n) in nums.iter().enumerate() {
            shift[i] = n
                .parse()
                .map_err(|_| bad("shift component is not an integer"))?;
        }

        Ok(Transform { src, flip, shift })
    }
}

/// Which transforms [`sample_transform`] may draw.
///
/// `elements` holds the flip/permute part of the pool; `max_shift > 0`
/// additionally draws a uniform cyclic shift in `[-max_shift, max_shift]`
/// per axis. The defaults enable the full 48-element pool with no shifts.
#[derive(Debug, Clone)]
pub struct TransformConfig {
    pub elements: Vec<Transform>,
    pub max_shift: i64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            elements: Transform::cube_symmetries(),
            max_shift: 0,
        }
    }
}

impl TransformConfig {
    pub fn identity_only() -> Self {
        TransformConfig {
            elements: vec![Transform::identity()],
            max_shift: 0,
        }
    }

    pub fn flips_only() -> Self {
        let elements = (0..8u8)
            .map(|mask| Transform {
                src: [0, 1, 2],
                flip: [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0],
                shift: [0; 3],
            })
            .collect();
        TransformConfig {
            elements,
            max_shift: 0,
        }
    }
}

/// Draw a transform uniformly from the configured pool.
pub fn sample_transform<R: Rng>(
    rng: &mut R,
    cfg: &TransformConfig,
) -> Result<Transform, TransformError> {
    if cfg.elements.is_empty() {
        return Err(TransformError::EmptyPool);
    }
    let mut t = cfg.elements[rng.gen_range(0..cfg.elements.len())];
    if cfg.max_shift > 0 {
        for axis in 0..3 {
            t.shift[axis] = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        }
    }
    Ok(t)
}
