//! Neural components: the concept VQ-VAE, the composition generator and the
//! composition-conditioned base diffusion model, plus interpretation tools.
//!
//! All networks run on the CPU in `f32` via candle.

pub mod checkpoint;
pub mod composition;
pub mod denoiser;
pub mod diffusion;
pub mod generator;
pub mod interpret;
pub mod error;
pub mod nn;
pub mod vqvae;

pub use error::{ModelError, Result};

/// Independent 64-bit seed for a named stage, derived from the run seed.
///
/// FNV-1a over the stage name, mixed with the seed through SplitMix64.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stage_and_seed() {
        assert_eq!(derive_seed(1, "vae"), derive_seed(1, "vae"));
        assert_ne!(derive_seed(1, "vae"), derive_seed(1, "vqvae"));
        assert_ne!(derive_seed(1, "vae"), derive_seed(2, "vae"));
    }
}
