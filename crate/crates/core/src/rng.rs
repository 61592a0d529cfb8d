//! Counter-based randomness for dropout and drop-path masks.
//!
//! A draw is a pure function of `(seed, step, layer, index)`, so masks do not
//! depend on evaluation order.

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64 random bits keyed by their coordinates.
pub fn counter_u64(seed: u64, step: u64, layer: u64, index: u64) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    h = mix(h ^ step.wrapping_mul(GOLDEN));
    h = mix(h ^ layer.wrapping_add(0x632b_e59b_d9b4_e019));
    mix(h ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Uniform draw in `[0, 1)` keyed by its coordinates.
pub fn counter_uniform(seed: u64, step: u64, layer: u64, index: u64) -> f64 {
    (counter_u64(seed, step, layer, index) >> 11) as f64 / (1u64 << 53) as f64
}

/// Inverted-dropout keep mask with scale `1/(1-p)` on kept entries.
pub fn dropout_mask(p: f64, len: usize, seed: u64, step: u64, layer: u64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&p), "drop probability {p} outside [0, 1)");
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|i| {
            if counter_uniform(seed, step, layer, i as u64) < p {
                0.0
            } else {
                keep
            }
        })
        .collect()
}
