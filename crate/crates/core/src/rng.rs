//! Deterministic random-stream derivation.
//!
//! Every stochastic choice in the crate draws from a named substream derived
//! from the experiment seed by hashing a path of tags and indices. Streams are
//! stateless with respect to each other: the transform sampled for
//! (epoch, instance, view) never depends on batch composition, worker count,
//! or how many draws another stream consumed. This is what makes checkpoint
//! resume and re-runs bitwise reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A derivation point in the stream tree. Cheap to clone; `rng()` mints an
/// independent generator for the node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamKey {
    state: [u8; 32],
}

impl StreamKey {
    /// Root of the stream tree for one experiment seed.
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"siamlab.stream.v1");
        h.update(seed.to_le_bytes());
        Self { state: h.finalize().into() }
    }

    /// Derive a child stream by label.
    pub fn tag(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0x01]);
        h.update(label.as_bytes());
        Self { state: h.finalize().into() }
    }

    /// Derive a child stream by index.
    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0x02]);
        h.update(i.to_le_bytes());
        Self { state: h.finalize().into() }
    }

    /// Generator for this node. Two calls return identical generators.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.state)
    }
}

/// Standard-normal sample via Box-Muller. Kept in-crate so the exact draw
/// sequence is pinned by this code, not by an external crate version.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates permutation of 0..n, fully determined by the stream node.
pub fn shuffled_indices(n: usize, stream: &StreamKey) -> Vec<usize> {
    let mut rng = stream.rng();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.random::<f64>() * (i as f64 + 1.0)).floor() as usize;
        idx.swap(i, j.min(i));
    }
    idx
}
