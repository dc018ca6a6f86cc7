use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentConfig {
    /// Shifts are drawn from `[−offset_range, offset_range]` in both directions.
    pub offset_range: usize,
    pub noise_var: f64,
    pub hflip: bool,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.offset_range == 0 && self.noise_var == 0.0 && !self.hflip
    }
}

/// Shifts one `[C, H, W]` example by `dx` columns and `dy` rows with zero fill.
pub fn translate(example: &[f32], shape: [usize; 3], dx: isize, dy: isize) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; example.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = example[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random shift, optional horizontal flip and additive Gaussian noise, per example.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    if !(cfg.noise_var >= 0.0) {
        return Err(Error::invalid("augment", format!("noise variance {}", cfg.noise_var)));
    }
    if cfg.is_identity() {
        return Ok(batch.clone());
    }
    let spatial = cfg.offset_range > 0 || cfg.hflip;
    if spatial && batch.rank() != 4 {
        return Err(Error::shape("augment", format!("shifts and flips need [N,C,H,W], got {:?}", batch.shape())));
    }
    let n = batch.shape()[0];
    let len = batch.len() / n.max(1);
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).expect("finite non-negative deviation");
    let mut out = Vec::with_capacity(batch.len());
    for example in batch.data().chunks_exact(len.max(1)) {
        let mut ex = example.to_vec();
        if spatial {
            let s = batch.shape();
            let shape = [s[1], s[2], s[3]];
            let r = cfg.offset_range as isize;
            let (dx, dy) = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
            if dx != 0 || dy != 0 {
                ex = translate(&ex, shape, dx, dy);
            }
            if cfg.hflip && rng.gen_bool(0.5) {
                for row in ex.chunks_exact_mut(shape[2]) {
                    row.reverse();
                }
            }
        }
        if cfg.noise_var > 0.0 {
            for v in &mut ex {
                *v += noise.sample(rng) as f32;
            }
        }
        out.extend(ex);
    }
    Tensor::new(batch.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_config() {
        let x = Tensor::from_fn(vec![2, 1, 3, 3], |k| k as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, &AugmentConfig::default(), &mut rng).unwrap(), x);
    }

    #[test]
    fn shift_moves_pixel() {
        let mut img = vec![0.0f32; 25];
        img[2 * 5 + 1] = 1.0;
        let out = translate(&img, [1, 5, 5], 2, 0);
        assert_eq!(out[2 * 5 + 3], 1.0);
        assert_eq!(out.iter().sum::<f32>(), 1.0);
        assert!(translate(&img, [1, 5, 5], 4, 0).iter().all(|&v| v == 0.0));
        assert_eq!(translate(&img, [1, 5, 5], 0, -2)[1], 1.0);
    }

    #[test]
    fn shifts_stay_in_range_and_keep_mass() {
        let mut img = vec![0.0f32; 7 * 7];
        img[3 * 7 + 3] = 1.0;
        let x = Tensor::new(vec![1, 1, 7, 7], img).unwrap();
        let cfg = AugmentConfig { offset_range: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..400 {
            let y = augment(&x, &cfg, &mut rng).unwrap();
            let at = y.data().iter().position(|&v| v == 1.0).unwrap();
            seen.insert(at);
            assert_eq!(y.data().iter().sum::<f32>(), 1.0);
        }
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn flip_mirrors_rows() {
        let x = Tensor::from_fn(vec![1, 1, 1, 4], |k| k as f32);
        let cfg = AugmentConfig { hflip: true, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let outs: Vec<Vec<f32>> = (0..20).map(|_| augment(&x, &cfg, &mut rng).unwrap().into_data()).collect();
        assert!(outs.contains(&vec![3.0, 2.0, 1.0, 0.0]) && outs.contains(&vec![0.0, 1.0, 2.0, 3.0]));
    }

    #[test]
    fn noise_variance() {
        let x = Tensor::zeros(vec![1000, 1, 10, 10]);
        let cfg = AugmentConfig { noise_var: 0.1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = augment(&x, &cfg, &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = y.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.1).abs() < 0.005, "{var}");
    }

    #[test]
    fn flat_batches_take_noise_only() {
        let x = Tensor::zeros(vec![4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = AugmentConfig { noise_var: 1.0, ..Default::default() };
        assert_eq!(augment(&x, &noisy, &mut rng).unwrap().shape(), &[4, 3]);
        let shifted = AugmentConfig { offset_range: 1, ..Default::default() };
        assert!(augment(&x, &shifted, &mut rng).is_err());
    }
}
