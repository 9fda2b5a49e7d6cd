//! Reproducible random streams.
//!
//! A stream is addressed by a 64-bit seed plus a [`StreamId`]. The key is
//! derived with SplitMix64 and drives a ChaCha12 generator, so the same
//! address produces the same draws on every platform and independently of
//! the order in which other streams are consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Precision, Tensor};

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Init,
    Data,
    Noise,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494e_4954,
            Purpose::Data => 0x4441_5441,
            Purpose::Noise => 0x4e4f_4953,
            Purpose::Test => 0x5445_5354,
        }
    }
}

/// Address of a stream below its seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    /// Worker rank or micro-batch lane.
    pub lane: u64,
    pub purpose: Purpose,
    pub step: u64,
    /// Tensor index or other sub-address.
    pub sub: u64,
}

impl StreamId {
    pub fn new(lane: u64, purpose: Purpose, step: u64) -> Self {
        Self { lane, purpose, step, sub: 0 }
    }

    pub fn with_sub(self, sub: u64) -> Self {
        Self { sub, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    rng: ChaCha12Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        let words = [id.lane, id.purpose.tag(), id.step, id.sub];
        for (chunk, word) in key.chunks_exact_mut(8).zip(words) {
            state ^= word;
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { seed, id, rng: ChaCha12Rng::from_seed(key) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// A fresh stream at the same address with a different sub-address.
    pub fn fork(&self, sub: u64) -> RngStream {
        RngStream::new(self.seed, self.id.with_sub(sub))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// I.i.d. `N(0, std²)` samples of the given shape, stored in F64.
///
/// A zero `std` yields exact zeros without consuming the stream.
pub fn gaussian(rng: &mut RngStream, shape: Vec<usize>, std: f64) -> Tensor {
    assert!(std >= 0.0, "gaussian std must be nonnegative, got {std}");
    if std == 0.0 {
        return Tensor::zeros(shape, Precision::F64);
    }
    Tensor::from_fn(shape, Precision::F64, |_| std * rng.standard_normal())
}
