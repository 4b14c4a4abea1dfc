//! Semi-supervised training for fully convolutional segmentation networks.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] / [`t4f`]: dense rank-4 tensors and their binary file format.
//! - [`graph`]: a minimal reverse-mode autodiff engine over those tensors.
//! - [`model`]: a small U-Net-style network with a full-resolution feature
//!   tap at its second-last convolutional layer.
//! - [`losses`]: soft Dice loss, L2 / angular-cosine distances, and the
//!   pairwise margin embedding loss combined as `L = L_P + sum(lambda * L_E)`.
//! - [`sampler`]: random feature embedding — per-pixel sampling strategies,
//!   adjacency from a prior, gradient masking, and a Jensen-Shannon
//!   sampling-fidelity diagnostic.
//! - [`prior`]: similarity priors for unlabeled data, either copied from
//!   ground truth or produced by normalized cross-correlation template
//!   matching with a Dice-optimal threshold.
//! - [`data`]: a synthetic multi-domain lesion dataset generator with
//!   controlled intensity shift between domains.
//! - [`harness`]: the experiment protocol — lower/upper bound baselines,
//!   semi-supervised fine-tuning, evaluation, sweeps and CSV reporting.

pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod model;
pub mod prior;
pub mod sampler;
pub mod t4f;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tensor4};

/// Derives an independent child seed from a base seed and a stream tag,
/// splitmix64-style. Used everywhere a reproducible sub-stream is needed
/// (per-image generation, per-epoch shuffles, per-step sampling) so that
/// consuming one stream never perturbs another.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &part in stream {
        z = z.wrapping_add(part).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
