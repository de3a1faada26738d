//! Seeded inputs shared by the benchmarks.

use dasnet_core::{BBox, Detection, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[lo, hi)`.
pub fn random_tensor(shape: Shape, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// `n` overlapping candidate boxes inside a 416×416 image.
pub fn random_candidates(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..380.0), rng.random_range(0.0..380.0));
            let (w, h) = (rng.random_range(8.0..36.0), rng.random_range(8.0..36.0));
            Detection::new(BBox::new(x, y, w, h), rng.random_range(0.0..1.0))
        })
        .collect()
}
