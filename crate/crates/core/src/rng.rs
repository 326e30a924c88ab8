//! Seeded random streams. Each consumer draws from its own ChaCha stream
//! so that, for example, enabling mixup does not change which batches the
//! sampler produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Batches = 2,
    Augment = 3,
    Mixup = 4,
    Corpus = 5,
    Downsample = 6,
    Trials = 7,
    Misc = 8,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
