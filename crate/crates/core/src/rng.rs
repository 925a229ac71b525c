//! Reproducible uniform streams keyed by `(master_seed, stream_index)`.
//!
//! Each stream is a ChaCha8 generator seeded from the master seed with the
//! stream index selecting the ChaCha stream word, so streams never overlap and
//! the sequence does not depend on platform or thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream index reserved for the Monte Carlo expectation used by `sigma_matrices`.
pub const SIGMA_EXPECTATION_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    inner: ChaCha8Rng,
    drawn: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_index);
        Self {
            master_seed,
            stream_index,
            inner,
            drawn: 0,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Number of uniforms consumed so far.
    pub fn consumed(&self) -> u64 {
        self.drawn
    }

    /// Next uniform variate in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.drawn += 1;
        self.inner.random::<f64>()
    }
}
