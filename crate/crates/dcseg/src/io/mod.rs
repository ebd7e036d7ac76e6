//! On-disk formats, the synthetic dataset generator, and patch
//! geometry: everything that feeds volumes into and out of training.

mod manifest;
mod patches;
mod phantom;
mod volume;

pub use manifest::{Manifest, ManifestEntry, Split};
pub use patches::{extract_patch, sliding_positions, OverlapAccumulator};
pub use phantom::{generate_dataset, generate_volume, PhantomConfig, SplitCounts};
pub(crate) use phantom::volume_seed as phantom_volume_seed;
pub use volume::{
    read_mask, read_volume, write_mask, write_volume, Volume, FORMAT_VERSION, MAGIC,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a volume file)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: String, version: u16 },
    #[error("{path}: unknown dtype code {code}")]
    BadDtype { path: String, code: u8 },
    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: dims {dims:?} overflow the addressable volume size")]
    DimsOverflow { path: String, dims: [u32; 3] },
    #[error("{path}: expected dtype {expected}, file holds {actual}")]
    DtypeMismatch {
        path: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("manifest {path}, line {line}: {detail}")]
    ManifestParse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("manifest invariant violated: {0}")]
    ManifestInvariant(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("patch {patch:?} does not fit volume {volume:?}")]
    PatchTooLarge {
        patch: [usize; 3],
        volume: [usize; 3],
    },
    #[error("stride must be >= 1")]
    ZeroStride,
}
