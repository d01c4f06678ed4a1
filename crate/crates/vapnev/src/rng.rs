//! Deterministic random number generation.
//!
//! One `SeedRng` drives everything stochastic in a run: batch order,
//! dequantization noise, flips, reparametrization draws, Y-space sampling.
//! All draws go through f64 and convert at the tensor boundary, so the draw
//! sequence is identical for f32 and f64 models. State is a (seed, stream,
//! word position) triple, cheap to snapshot into a checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct SeedRng {
    inner: ChaCha8Rng,
    seed: [u8; 32],
}

/// Resumable snapshot of the generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl SeedRng {
    pub fn from_seed(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        SeedRng { inner: ChaCha8Rng::from_seed(bytes), seed: bytes }
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Bernoulli draw with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_tensor<E: Scalar>(&mut self, shape: &[usize]) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| E::from_f64(self.normal())).collect();
        Tensor::new(shape, data).expect("count matches shape")
    }

    /// Uniform tensor on [lo, hi).
    pub fn uniform_tensor<E: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(lo + (hi - lo) * self.uniform()))
            .collect();
        Tensor::new(shape, data).expect("count matches shape")
    }

    /// Fisher–Yates shuffle of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        SeedRng { inner, seed: state.seed }
    }
}
