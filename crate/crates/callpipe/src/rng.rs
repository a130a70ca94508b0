//! Deterministic random number streams.
//!
//! One master seed (`experiment.manual_seed`) drives the whole pipeline.
//! Each consumer derives its own independent stream so that adding or
//! removing draws in one place never shifts the numbers seen elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream identifiers, one per RNG consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Model weight initialization.
    Init,
    /// Train/val split shuffling.
    Split,
    /// Balanced batch sampling.
    Sampler,
    /// Waveform augmentations.
    Augment,
    /// Sweep candidate sampling.
    Sweep,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Split => 2,
            Stream::Sampler => 3,
            Stream::Augment => 4,
            Stream::Sweep => 5,
        }
    }
}

/// Derives the deterministic RNG for `stream` from the master seed.
pub fn derive(master_seed: u64, stream: Stream) -> ChaCha8Rng {
    derive_with_offset(master_seed, stream, 0)
}

/// Like [`derive`], with an extra offset for per-worker or per-run streams.
pub fn derive_with_offset(master_seed: u64, stream: Stream, offset: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream.id().wrapping_mul(1 << 32).wrapping_add(offset));
    rng
}
