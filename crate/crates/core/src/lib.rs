//! Toolkit for auditing resolution-induced systematic bias in volumetric
//! segmentations.

pub mod audit;
pub mod error;
pub mod errorsim;
pub mod metrics;
pub mod phantom;
pub mod resample;
pub mod volume;

pub use error::{Error, Result};

/// Mixes a base seed with a stream index (SplitMix64 finalizer) so that
/// per-subject generators are independent of evaluation order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
