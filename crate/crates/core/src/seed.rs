//! Deterministic sub-seed derivation.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream label and indices into an independent seed.
pub fn derive_seed(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for b in label.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams() {
        let a = derive_seed(1, "expert", &[1, 0]);
        assert_eq!(a, derive_seed(1, "expert", &[1, 0]));
        assert_ne!(a, derive_seed(1, "expert", &[0, 1]));
        assert_ne!(a, derive_seed(1, "router", &[1, 0]));
        assert_ne!(a, derive_seed(2, "expert", &[1, 0]));
    }
}
