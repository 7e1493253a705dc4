//! Counter-based randomness: every draw is a pure function of its key, so
//! dropout masks are reproducible regardless of evaluation order.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` keyed by `(seed, layer, step, index)`.
pub fn counter_uniform(seed: u64, layer: u64, step: u64, index: u64) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ layer);
    h = splitmix64(h ^ step);
    h = splitmix64(h ^ index);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
