//! Cross-domain convolutional classifier for hyperspectral imagery.
//!
//! The crate is organized as a vertical stack:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation over dense tensors,
//!   the nine primitives the network needs, SGD with momentum, and a finite
//!   difference gradient checker.
//! * [`hsdata`]: hyperspectral cube and label map I/O plus a synthetic scene
//!   generator for tests and demos.
//! * [`sampler`]: stratified train/test splits, patch extraction with mirror
//!   padding, dihedral augmentation, and deterministic batch scheduling.
//! * [`xnet`]: the shared-trunk, per-domain front/head network, parameter
//!   partitioning, and checkpointing.
//! * [`traineval`]: the interleaved multi-domain training loop, evaluation,
//!   and full-scene prediction maps.

// index loops follow the array math, and the tensor kernels take full
// shape lists as arguments
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod autodiff;
pub mod error;
pub mod hsdata;
pub mod sampler;
pub mod traineval;
pub mod xnet;

pub use error::{Error, Result};

/// Derive an independent RNG seed from a base seed and a stream index
/// (splitmix64 finalizer). Used everywhere two components must not share a
/// random stream.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
