//! Semi-supervised 3D lesion segmentation at desk scale.
//!
//! `dcseg` trains a multi-decoder volumetric segmentation network from a
//! handful of labeled synthetic volumes plus a larger pool of unlabeled
//! ones. Two consistency signals harvest the unlabeled data:
//!
//! * **image-level**: predictions must commute with invertible spatial
//!   transforms of the input (flips, axis permutations),
//! * **feature-level**: auxiliary decoders fed perturbed bottleneck
//!   features must agree with the main decoder.
//!
//! Per-voxel confidence and consensus scores gate the feature-level term
//! so that only reliable voxels contribute. Everything runs on the CPU on
//! top of a small reverse-mode autodiff engine written for this crate;
//! `f64` mode plus finite-difference checking keeps the gradients honest.
//!
//! The guide under `book/` walks through each subsystem with runnable
//! snippets; those snippets compile as doc-tests of this crate.

pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod perturb;
pub mod pipeline;
pub mod tensor;
pub mod transform;
pub mod uncertainty;

pub use tensor::{Element, Graph, NodeId, Tensor};

// Book chapters double as doc-tests so the guide cannot drift from the
// API. Only rustdoc sees this module.
#[cfg(any())] // book chapters wired up at the end
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/perturbations.md")]
    mod perturbations {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    mod uncertainty {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
