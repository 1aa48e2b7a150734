//! Seed derivation for perturbation streams.

/// One round of the splitmix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of perturbation `i` at iteration `t` of a run seeded with `base`.
pub fn derive(base: u64, t: u64, i: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ t) ^ i.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..50 {
            for i in 0..20 {
                assert!(seen.insert(derive(7, t, i)));
            }
        }
    }
}
