//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Masking,
    Batching,
    Split,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Data => "data",
            Stream::Masking => "masking",
            Stream::Batching => "batching",
            Stream::Split => "split",
        }
    }
}

pub type StreamRng = ChaCha8Rng;

fn derive(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn stream(seed: u64, s: Stream) -> StreamRng {
    derive(seed, s.name(), u64::MAX)
}

/// Independent stream for one index (a training step, a record, ...), so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn indexed_stream(seed: u64, s: Stream, index: u64) -> StreamRng {
    derive(seed, s.name(), index)
}
