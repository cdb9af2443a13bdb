use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A reproducible stream of standard-normal variates.
///
/// Backed by ChaCha8 keyed by `(seed, channel)` with the ChaCha stream id set
/// to `substream`, so every `(seed, channel, substream)` triple addresses its
/// own counter-based sequence. Monte-Carlo engines use the path index as the
/// substream, which makes results independent of how paths are scheduled.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    substream: u64,
    channel: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, substream: u64) -> Self {
        Self::with_channel(seed, substream, 0)
    }

    pub fn with_channel(seed: u64, substream: u64, channel: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&channel.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(substream);
        Self {
            seed,
            substream,
            channel,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self) -> u64 {
        self.substream
    }

    pub fn channel(&self) -> u64 {
        self.channel
    }
}

/// Next standard-normal variate of `stream`.
pub fn gaussian(stream: &mut RngStream) -> f64 {
    stream.rng.sample(StandardNormal)
}
