//! Named-stream splittable RNG: every consumer draws from an independent
//! stream keyed by (seed, purpose tag, id), so determinism survives
//! reordering and parallel generation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the key material; stable across platforms and builds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic stream for (seed, tag, id).
pub fn stream(seed: u64, tag: &str, id: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&id.to_le_bytes());
    key[24..32].copy_from_slice(&fnv1a(&[seed.to_le_bytes(), id.to_le_bytes()].concat()).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_independent() {
        let mut a: Vec<f64> = Vec::new();
        let mut rng = stream(7, "aug", 3);
        for _ in 0..4 {
            a.push(rng.gen());
        }
        let mut rng2 = stream(7, "aug", 3);
        let b: Vec<f64> = (0..4).map(|_| rng2.gen()).collect();
        assert_eq!(a, b);

        let mut other_tag = stream(7, "split", 3);
        let c: f64 = other_tag.gen();
        assert_ne!(a[0], c);
        let mut other_id = stream(7, "aug", 4);
        let d: f64 = other_id.gen();
        assert_ne!(a[0], d);
    }
}
