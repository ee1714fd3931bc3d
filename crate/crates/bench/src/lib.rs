//! Benchmark fixtures.

/// Deterministic pseudo-features in `[-1, 1)`, row-major `rows x dim`.
pub fn features(rows: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut s = seed | 1;
    (0..rows * dim)
        .map(|_| {
            // xorshift64
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect()
}
