//! Seed derivation and reproducible sampling helpers.
//!
//! All randomness in the crate flows through ChaCha20 streams derived from a
//! user-facing `u64` seed, so runs are bit-reproducible and independent
//! units of work (trajectories, evaluation examples, rollout samples) can be
//! processed in any order or in parallel without changing results.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// Derive a child RNG from a base seed and a path of indices
/// (e.g. `[example, sample]`). SplitMix64-style mixing keeps distinct paths
/// statistically independent.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha20Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        state = mix(state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p));
    }
    ChaCha20Rng::seed_from_u64(state)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard-normal tensor drawn in C order from `rng`.
pub fn standard_normal(shape: &[usize], rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform tensor on `[lo, hi)` drawn in C order from `rng`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a1: u64 = derive_rng(7, &[1, 2]).random();
        let a2: u64 = derive_rng(7, &[1, 2]).random();
        let b: u64 = derive_rng(7, &[2, 1]).random();
        let c: u64 = derive_rng(8, &[1, 2]).random();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }

    #[test]
    fn normal_draws_reproduce_for_equal_seeds() {
        let x = standard_normal(&[4, 3], &mut derive_rng(1, &[0]));
        let y = standard_normal(&[4, 3], &mut derive_rng(1, &[0]));
        assert_eq!(x, y);
    }
}
