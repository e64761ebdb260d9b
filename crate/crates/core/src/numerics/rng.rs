use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-based source of independent random streams under one master seed.
///
/// Each call to [`StreamRng::next_stream`] yields a generator on a fresh
/// ChaCha stream, so the sequence of draws depends only on the master seed
/// and the call index.
#[derive(Clone, Debug)]
pub struct StreamRng {
    master: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(master: u64) -> Self {
        Self { master, counter: 0 }
    }

    pub fn next_stream(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }

    pub fn calls(&self) -> u64 {
        self.counter
    }
}

/// Mixes several integers into one seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15_u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
