//! Deterministic RNG derivation.
//!
//! Every random decision in the pipeline draws from a `ChaCha8Rng` whose seed
//! is derived from the master seed plus a structural path (participant id,
//! fold index, epoch number, ...). Derivation uses FNV-1a over the path
//! bytes, which is stable across platforms and Rust versions, so the whole
//! pipeline is a pure function of (inputs, config, master seed).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Stable 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Accumulates seed material from heterogeneous parts.
#[derive(Clone)]
pub struct SeedPath {
    parts: Vec<u8>,
}

impl SeedPath {
    pub fn new(master: u64) -> Self {
        let mut parts = Vec::with_capacity(64);
        parts.extend_from_slice(&master.to_le_bytes());
        SeedPath { parts }
    }

    pub fn push_str(mut self, s: &str) -> Self {
        // Length prefix keeps ("ab","c") distinct from ("a","bc").
        self.parts.extend_from_slice(&(s.len() as u64).to_le_bytes());
        self.parts.extend_from_slice(s.as_bytes());
        self
    }

    pub fn push_u64(mut self, v: u64) -> Self {
        self.parts.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// 32-byte ChaCha seed: four FNV passes with distinct lane tags.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for lane in 0u8..4 {
            let mut tagged = self.parts.clone();
            tagged.push(lane);
            let h = fnv1a(&tagged);
            seed[lane as usize * 8..(lane as usize + 1) * 8].copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Convenience: RNG for a (master seed, tag, index) triple.
pub fn derive_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    SeedPath::new(master).push_str(tag).push_u64(index).rng()
}
