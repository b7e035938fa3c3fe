//! Seeded generator derivation. Every random stream in a run is a ChaCha8
//! generator keyed by (run seed, purpose, index), so skipping one stream
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named purposes for derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batch = 3,
    Sampling = 4,
    TeacherSampling = 5,
    TeacherNoise = 6,
    Boundary = 7,
    Prototypes = 8,
    Stage2Init = 9,
    Stage2Batch = 10,
    UnlabeledBatch = 11,
    UnlabeledSampling = 12,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derive(seed: u64, stream: Stream, index: u64) -> Rng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ index);
    Rng::seed_from_u64(key)
}
