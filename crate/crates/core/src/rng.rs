//! Counter-based random streams.
//!
//! Every draw in a simulation comes from a stream addressed by
//! `(seed, key, step)`. The key is hashed into a ChaCha key and the step
//! selects the ChaCha stream, so no stream depends on how many values any
//! other stream has consumed. Results are therefore independent of task
//! scheduling and worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Opens the stream for `(seed, key, step)`.
pub fn stream(seed: u64, key: &str, step: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    rng.set_stream(step);
    rng
}

/// Well-known step indices for per-task streams that are not policy steps.
pub mod steps {
    /// Task generation.
    pub const GENERATE: u64 = 1 << 40;
    /// Human adjudication.
    pub const ADJUDICATE: u64 = (1 << 40) + 1;
    /// Input perturbation replicas.
    pub const PERTURB: u64 = (1 << 40) + 2;
    /// Offline component benchmarking.
    pub const BENCHMARK: u64 = (1 << 40) + 3;
}
