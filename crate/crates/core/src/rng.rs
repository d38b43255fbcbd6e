//! Deterministic seeded random streams.
//!
//! Every source of randomness in the crate is a ChaCha8 stream derived from
//! a master seed plus a purpose label (and optionally an index), so
//! independent subsystems never share state and runs are reproducible
//! bit-for-bit. Stream positions can be captured and restored, which is what
//! makes interrupted training resumable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to fold purpose labels into seed material.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child u64 seed from a master seed, a label and an index.
/// Used for per-scene seeds recorded in dataset manifests.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = fnv1a(label.as_bytes());
    h ^= master;
    h = h.wrapping_mul(0x100000001b3);
    h ^= index;
    h = h.wrapping_mul(0x100000001b3);
    // splitmix64 finalizer to decorrelate nearby indices
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// A named ChaCha8 stream whose full position is observable.
pub struct SeedStream {
    rng: ChaCha8Rng,
    seed: [u8; 32],
}

impl SeedStream {
    /// Stream keyed by `(master, label)`. Distinct labels give independent
    /// streams even under the same master seed.
    pub fn new(master: u64, label: &str) -> Self {
        Self::with_index(master, label, 0)
    }

    /// Stream keyed by `(master, label, index)`.
    pub fn with_index(master: u64, label: &str, index: u64) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&master.to_le_bytes());
        seed[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
        seed[16..24].copy_from_slice(&derive_seed(master, label, index).to_le_bytes());
        seed[24..32].copy_from_slice(&index.to_le_bytes());
        SeedStream { rng: ChaCha8Rng::from_seed(seed), seed }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Capture (seed, word position) for exact resume.
    pub fn save(&self) -> StreamState {
        StreamState { seed: self.seed, word_pos: self.rng.get_word_pos() }
    }

    /// Restore a previously captured position.
    pub fn restore(state: &StreamState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_word_pos(state.word_pos);
        SeedStream { rng, seed: state.seed }
    }
}

/// Serializable position of a [`SeedStream`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl StreamState {
    /// Hex encoding: 64 hex chars of seed + ':' + 32 hex chars of position.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(97);
        for b in self.seed {
            s.push_str(&format!("{b:02x}"));
        }
        s.push(':');
        s.push_str(&format!("{:032x}", self.word_pos));
        s
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let (seed_hex, pos_hex) = s.split_once(':')?;
        if seed_hex.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for i in 0..32 {
            seed[i] = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).ok()?;
        }
        let word_pos = u128::from_str_radix(pos_hex, 16).ok()?;
        Some(StreamState { seed, word_pos })
    }
}
