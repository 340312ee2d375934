//! Counter-based seed derivation so that per-member randomness does not
//! depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams within one filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Transition = 1,
    Sensor = 2,
    Init = 3,
    Shuffle = 4,
    Weights = 5,
    Simulation = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of `(run_seed, stream, step, index)`.
pub fn derive(run_seed: u64, stream: Stream, step: u64, index: u64) -> u64 {
    let mut h = splitmix64(run_seed);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ step);
    splitmix64(h ^ index)
}

pub fn member_seeds(run_seed: u64, stream: Stream, step: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| derive(run_seed, stream, step, i))
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_separates_coordinates() {
        let base = derive(7, Stream::Transition, 3, 0);
        assert_eq!(base, derive(7, Stream::Transition, 3, 0));
        assert_ne!(base, derive(8, Stream::Transition, 3, 0));
        assert_ne!(base, derive(7, Stream::Sensor, 3, 0));
        assert_ne!(base, derive(7, Stream::Transition, 4, 0));
        assert_ne!(base, derive(7, Stream::Transition, 3, 1));
    }
}
