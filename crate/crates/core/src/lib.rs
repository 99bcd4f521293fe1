//! Fault-sensitivity search and DVFS fault-injection simulation for small
//! CNNs.
//!
//! - [`tensor`]: binary32 tensors and bit flips.
//! - [`engine`]: forward pass with mid-inference bit flips.
//! - [`sensitivity`]: bit gradients, target sensitivities, top-N selection.
//! - [`device`]: voltage/frequency fault model and execution schedule.
//! - [`attack`]: glitch planning, attack trials and campaigns.
//! - [`genetic`]: genetic refinement of glitch parameters.
//! - [`io`]: model, dataset, config and result formats.

pub mod attack;
pub mod device;
pub mod engine;
pub mod error;
pub mod genetic;
pub mod io;
pub mod sensitivity;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for `seed` and a path of stream labels (for example
/// trial index, then attempt index). Distinct paths give independent streams.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = 0x243f_6a88_85a3_08d3u64;
    for &p in path {
        stream = splitmix(stream ^ splitmix(p.wrapping_add(1)));
    }
    rng.set_stream(stream);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    #[test]
    fn derived_streams_differ_and_repeat() {
        let a: u64 = super::derive_rng(1, &[2, 3]).random();
        assert_eq!(a, super::derive_rng(1, &[2, 3]).random::<u64>());
        assert_ne!(a, super::derive_rng(1, &[3, 2]).random::<u64>());
        assert_ne!(a, super::derive_rng(1, &[2]).random::<u64>());
        assert_ne!(a, super::derive_rng(2, &[2, 3]).random::<u64>());
    }
}
