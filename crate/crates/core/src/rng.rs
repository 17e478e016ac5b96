//! Named random streams split from one master seed.
//!
//! Each consumer (initialization, lot sampling, DP noise, corpus synthesis)
//! draws from its own ChaCha8 stream, so changing how much one consumer draws
//! never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Sampling,
    Noise,
    Synth,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Sampling => 2,
            Stream::Noise => 3,
            Stream::Synth => 4,
        }
    }
}

pub fn stream(master_seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(which.id());
    rng
}

/// Exact position of a ChaCha8 generator, sufficient to resume it bit for bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub const RNG_STATE_BYTES: usize = 32 + 8 + 16;

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> [u8; RNG_STATE_BYTES] {
        let mut out = [0u8; RNG_STATE_BYTES];
        out[..32].copy_from_slice(&self.seed);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; RNG_STATE_BYTES]) -> Self {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        Self {
            seed,
            stream: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(bytes[40..].try_into().unwrap()),
        }
    }
}
