//! Memory-adaptive in-context learning for 3D volumes.
//!
//! A single trained network solves a family of volumetric tasks — segmentation,
//! denoising, bias-field removal, inpainting, super-resolution, slice
//! completion, contrast mapping — by conditioning on a context set of
//! input/output example pairs at inference time. The context set is folded into
//! a fixed-size representation by averaging per-stage features over example
//! pairs, which lets the engine process arbitrarily many examples in
//! fixed-size chunks: memory stays bounded by the chunk size while the result
//! is identical to processing everything at once.
//!
//! Everything is CPU-only, deterministic, and dependency-light: tensors,
//! kernels, and reverse-mode differentiation live in [`tensor`], the
//! dual-branch network in [`net`], chunked context processing in [`apsp`],
//! task-balanced losses in [`losses`], the synthetic episode generator in
//! [`taskgen`], and the training/evaluation harness in [`train`].

/// The compute path allocates and frees buffers above the default-allocator
/// mmap threshold on every operation; a caching allocator keeps those
/// segments mapped and roughly halves end-to-end forward time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod apsp;
pub mod check;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, Volume};
