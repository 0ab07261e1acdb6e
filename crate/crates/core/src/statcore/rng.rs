use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};

use super::StatError;

/// A deterministic pseudo-random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives 2^64 independent
/// substreams per key. A stream is owned by exactly one replicate at a time.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Next variate from Uniform(0, 1); never exactly 0 or 1.
    pub fn uniform(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One Gaussian variate with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, sd: f64) -> Result<f64, StatError> {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(StatError::InvalidScale(sd));
        }
        Ok(mean + sd * self.standard_normal())
    }

    /// Bernoulli(p) indicator from a single uniform draw.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// Seed for replicate `index` of a study keyed by `master`.
///
/// SplitMix64 finalizer over the pair; distinct indices give unrelated
/// ChaCha keys.
pub fn substream_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
