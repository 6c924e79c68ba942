use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) type Rng = ChaCha8Rng;

/// Independent stream for a (seed, purpose) pair so that adding draws in one
/// place never shifts the draws made in another.
pub(crate) fn stream(seed: u64, purpose: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub(crate) mod purpose {
    pub const BLOB_MEANS: u64 = 1;
    pub const BLOB_NOISE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const GRADCHECK: u64 = 7;
    /// Expansion draws are offset by the session index.
    pub const EXPAND: u64 = 100;
}
