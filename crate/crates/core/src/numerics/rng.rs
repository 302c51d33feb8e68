//! Counter-based, label-derived random streams.
//!
//! A stream is keyed by `(seed, label)`; each `counter` selects an
//! independent ChaCha sub-stream. Nothing is shared or mutated, so any
//! worker can regenerate the draws for (sample, step, batch element) on its
//! own and get the same bits on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self {
            seed,
            label: label.into(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Child stream `label/sub`.
    pub fn derive(&self, sub: impl std::fmt::Display) -> Self {
        Self {
            seed: self.seed,
            label: format!("{}/{}", self.label, sub),
        }
    }

    /// Hashes the key once for repeated sub-stream construction.
    pub fn keyed(&self) -> KeyedStream {
        KeyedStream { key: self.key() }
    }

    fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.label.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(digest.as_slice());
        key
    }

    /// Generator positioned at the start of sub-stream `counter`.
    pub fn rng(&self, counter: u64) -> ChaCha8Rng {
        self.keyed().rng(counter)
    }

    /// `n` standard-normal draws from sub-stream `counter`.
    pub fn normals<T: Scalar>(&self, counter: u64, n: usize) -> Vec<T> {
        let mut rng = self.rng(counter);
        fill_normals(&mut rng, n)
    }

    /// `n` uniform draws in `[0, 1)` from sub-stream `counter`.
    pub fn uniforms<T: Scalar>(&self, counter: u64, n: usize) -> Vec<T> {
        let mut rng = self.rng(counter);
        (0..n).map(|_| T::of(rng.random::<f64>())).collect()
    }
}

/// A stream with its key already derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyedStream {
    key: [u8; 32],
}

impl KeyedStream {
    pub fn rng(&self, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(counter);
        rng
    }

    pub fn normals<T: Scalar>(&self, counter: u64, n: usize) -> Vec<T> {
        fill_normals(&mut self.rng(counter), n)
    }
}

/// Draws in `f64` and casts, so `f32` and `f64` consumers see the same stream.
pub fn fill_normals<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    mean + std * rng.sample::<f64, _>(StandardNormal)
}
