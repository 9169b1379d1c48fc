use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// FNV-1a, used to derive stable seeds from names.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for `(seed, tag)`.
pub(crate) fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ fnv1a(tag.as_bytes())))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercased, whitespace-collapsed form used for name comparisons.
pub(crate) fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Filesystem-safe directory/file stem for a category name.
pub fn slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for ch in normalize_name(name).chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch);
        } else if (ch == ' ' || ch == '-' || ch == '_') && !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slug_is_filesystem_safe() {
        assert_eq!(slug("Canada Goose"), "canada_goose");
        assert_eq!(slug("  Red   disk "), "red_disk");
        assert_eq!(slug("Chicken/Eggs!"), "chickeneggs");
    }

    #[test]
    fn streams_are_independent_of_tag() {
        use rand::Rng;
        let a: u64 = stream(1, "split").random();
        let b: u64 = stream(1, "init").random();
        let c: u64 = stream(1, "split").random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
