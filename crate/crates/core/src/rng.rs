//! Counter-based random streams.
//!
//! Every stochastic quantity in the pipeline is drawn from a ChaCha stream
//! whose seed is a hash of a base seed and a tuple of counters (tuple id,
//! round, step, ...). Results therefore do not depend on the order in which
//! independent streams are advanced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Domain tags keep streams for different purposes apart even when their
/// counters coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Tag {
    ExperimentDraw = 1,
    Sgld = 2,
    Latent = 3,
    NetInit = 4,
    Truth = 5,
    Bank = 6,
    Noise = 7,
    Sample = 8,
    DotTest = 9,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed, a tag and a list of counters into a 64-bit key.
pub fn key(seed: u64, tag: Tag, counters: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(tag as u64));
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, tag: Tag, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, tag, counters))
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_keyed() {
        let a: u64 = stream(7, Tag::Sgld, &[1, 2]).random();
        let b: u64 = stream(7, Tag::Sgld, &[1, 2]).random();
        let c: u64 = stream(7, Tag::Sgld, &[2, 1]).random();
        let d: u64 = stream(7, Tag::Latent, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
