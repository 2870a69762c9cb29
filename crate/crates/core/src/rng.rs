//! Counter-derived RNG streams.
//!
//! Every stream is a ChaCha8 generator keyed by the tuple
//! `(seed, entity, round, purpose)`, so a client's draws never depend on how
//! many other clients ran before it or on which thread ran it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    GradientBatches = 1,
    HessianBatches = 2,
    ClientSampling = 3,
    Evaluation = 4,
    Partition = 5,
    Probe = 6,
}

/// Seeded generator that also counts the batches drawn from it.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    batches_drawn: usize,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batches_drawn: 0,
        }
    }

    pub fn derive(seed: u64, entity: u64, round: u64, purpose: Purpose) -> Self {
        let mut key = [0u8; 32];
        for (chunk, word) in key.chunks_exact_mut(8).zip([seed, entity, round, purpose as u64]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(key),
            batches_drawn: 0,
        }
    }

    pub fn batches_drawn(&self) -> usize {
        self.batches_drawn
    }

    pub(crate) fn note_batch(&mut self) {
        self.batches_drawn += 1;
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
