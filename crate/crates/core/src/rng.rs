//! Deterministic random streams keyed by `(seed, tag)`.
//!
//! Every consumer of randomness asks for its own named stream so that adding
//! draws in one place never perturbs another. The generator is ChaCha8 with
//! the seed expanded through `seed_from_u64` and the tag hashed (FNV-1a) into
//! the ChaCha stream id, which is portable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Returns the random stream for `(seed, tag)`.
pub fn rng_stream(seed: u64, tag: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag.as_bytes()));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(seed: u64, tag: &str) -> Vec<u64> {
        let mut r = rng_stream(seed, tag);
        (0..100).map(|_| r.random::<u64>()).collect()
    }

    #[test]
    fn same_seed_and_tag_repeat() {
        assert_eq!(draws(7, "shift"), draws(7, "shift"));
    }

    #[test]
    fn seed_changes_stream() {
        assert_ne!(draws(7, "shift"), draws(8, "shift"));
    }

    #[test]
    fn tag_changes_stream() {
        assert_ne!(draws(7, "shift"), draws(7, "init"));
    }

    #[test]
    fn stream_is_pinned() {
        // Guards against silent changes in the underlying generator.
        assert_eq!(draws(7, "shift")[0], 2_359_605_656_424_659_097);
    }
}
