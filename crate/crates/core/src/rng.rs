//! Counter-keyed random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream keyed by
//! `(seed, domain, index)`. The key fully determines the stream, so a path's
//! noise does not depend on which worker generated it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Brownian = 0x4252_4f57,
    InitialState = 0x5830_5830,
    Probe = 0x5052_4f42,
    Init = 0x494e_4954,
    Derive = 0x4445_5256,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, domain, index)`; the index selects the ChaCha stream id.
pub fn keyed_rng(seed: u64, domain: Domain, index: u64) -> SeededRng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ (domain as u64).rotate_left(17));
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. one per training iteration.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ Domain::Derive as u64).wrapping_add(index))
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}
