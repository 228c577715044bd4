//! Single-source segmentation with an explicit shape dictionary and
//! dual-consistency test-time adaptation.
//!
//! - [`shape_dictionary`]: sparse coding, online dictionary learning, reference masks.
//! - [`segnet`]: encoder–decoder with a coefficient-regression branch and training losses.
//! - [`tta`]: one-step online adaptation of batch-norm affine parameters.
//! - [`synthdata`]: controlled source and appearance-shifted target domains.
//! - [`metrics`]: Dice and Hausdorff distance.

pub mod shape_dictionary;
pub mod metrics;
pub mod synthdata;
pub mod segnet;
pub mod tta;

/// SplitMix64 finalizer over a combined pair; derives independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
