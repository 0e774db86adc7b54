//! Deterministic RNG streams. Every random draw in the crate comes from a
//! ChaCha8 stream derived from (seed, label), so runs are bitwise
//! reproducible from their config and parallel-safe to re-derive per scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over the label bytes; avoids platform-dependent
/// hashers so derived streams never change across builds.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent stream for a named purpose under a run seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label));
    rng.set_stream(fnv1a(label));
    rng
}

/// Per-scene stream, stable regardless of generation order.
pub fn scene_stream(seed: u64, label: &str, scene_id: u64) -> ChaCha8Rng {
    stream(seed ^ scene_id.wrapping_mul(0x9e3779b97f4a7c15), label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a: f64 = stream(7, "alpha").gen();
        let b: f64 = stream(7, "alpha").gen();
        let c: f64 = stream(7, "beta").gen();
        let d: f64 = stream(8, "alpha").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn scene_streams_do_not_collide_with_neighbors() {
        let x: f64 = scene_stream(7, "gen", 1).gen();
        let y: f64 = scene_stream(7, "gen", 2).gen();
        assert_ne!(x, y);
    }
}
