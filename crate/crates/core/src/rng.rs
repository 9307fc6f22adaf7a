//! Seeded random streams.
//!
//! Every random draw made during expansion or initialisation comes from a
//! [`RandStream`]: ChaCha8 keyed from the 64-bit seed, with the ChaCha stream
//! id set to `(purpose << 48) | index`. ChaCha is a counter-based generator,
//! so each `(seed, purpose, index)` triple addresses an independent,
//! reproducible sequence. Per-block work therefore draws the same numbers
//! whether blocks are processed serially or in parallel.
//!
//! Normal samples use `rand_distr::StandardNormal` in `f64` and are then
//! converted to the tensor's scalar type, so `f32` and `f64` models built from
//! the same seed agree up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a stream is used for; part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Embedding = 2,
    BlockWidth = 3,
    BlockDepth = 4,
    FinalNorm = 5,
    Decoder = 6,
    Cnn = 7,
    Verify = 8,
    Toy = 9,
}

pub struct RandStream {
    rng: ChaCha8Rng,
}

impl RandStream {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
        Self { rng }
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        z * std
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.normal(std))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches length")
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.uniform(lo, hi))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches length")
    }
}
