//! Counter-based random substreams.
//!
//! Every consumer draws from its own ChaCha stream keyed by the master seed
//! and a domain tag, with the stream id chosen by the caller (trajectory,
//! coordinate, sample, ...). Results therefore never depend on scheduling or
//! on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep independent uses of one master seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Brownian = 1,
    Bootstrap = 2,
    DemoHistory = 3,
    MultiStart = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The generator for stream `stream` of `domain` under `seed`.
pub fn substream(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}
