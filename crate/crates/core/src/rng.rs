//! Counter-based, splittable random streams.
//!
//! A stream is a ChaCha8 keystream selected by `(seed, stream_id)`; the draw
//! index is the keystream position. Sub-streams are addressed by hashing a
//! label into a fresh stream id, so trials, layers, epochs and batches each
//! get their own reproducible sequence without sharing any state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream for `label`, starting at draw 0.
    ///
    /// Depends only on `(seed, stream_id, label)`, never on how many values
    /// have been drawn from `self`.
    pub fn derive(&self, label: u64) -> RngStream {
        let id = splitmix64(splitmix64(self.stream_id) ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        RngStream::new(self.seed, id)
    }

    /// Child stream addressed by a path of labels, e.g. `[epoch, batch]`.
    pub fn derive_path(&self, labels: &[u64]) -> RngStream {
        labels.iter().fold(self.clone(), |s, &l| s.derive(l))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Position in the keystream, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Well-known sub-stream labels so call sites don't collide by accident.
pub mod label {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const INPUT_CHAIN: u64 = 10;
    pub const WEIGHT_CHAIN: u64 = 11;
    pub const BIAS_CHAIN: u64 = 12;
    pub const OUTPUT_CHAIN: u64 = 13;
}
