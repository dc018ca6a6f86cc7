//! Shared fixtures for the benchmarks.

use apnorm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `[n, ...example]` batch of uniform [0, 1) pixels.
pub fn uniform_batch(n: usize, example: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(example);
    Tensor::from_fn(shape, |_| rng.gen())
}

/// Labels cycling through `classes`.
pub fn cyclic_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_the_requested_shape() {
        let b = uniform_batch(3, &[2, 4, 4], 1);
        assert_eq!(b.shape(), &[3, 2, 4, 4]);
        assert!(b.data().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(cyclic_labels(5, 2), vec![0, 1, 0, 1, 0]);
    }
}
