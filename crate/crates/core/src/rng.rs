//! Keyed random streams.
//!
//! Every consumer of randomness asks for a stream keyed by the run seed, a
//! domain tag and up to two counters (epoch, sample index, view index...).
//! Streams are independent of the order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep streams for different purposes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    EncoderInit = 1,
    QueueInit = 2,
    Shuffle = 3,
    Augment = 4,
    Centers = 5,
    SampleNoise = 6,
    Split = 7,
    Probe = 8,
    Finetune = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut state = seed;
    let mut key = [0u8; 32];
    let mut mix = [domain as u64, a, b, 0x636f_325f_7273_6e67];
    for (chunk, extra) in key.chunks_exact_mut(8).zip(mix.iter_mut()) {
        state ^= splitmix64(&mut state) ^ *extra;
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
