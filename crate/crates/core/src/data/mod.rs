//! Datasets: binary loaders, augmentation, statistics and synthetic data.

mod augment;
mod cifar;
mod idx;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::moments::MomentPair;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub use augment::{augment, translate, AugmentConfig};
pub use cifar::{load_cifar10, CIFAR_RECORD};
pub use idx::{load_mnist, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES, IDX_LABELS};

const ORDER_STREAM: u64 = 0x6f72_6465;

/// Examples with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`; images are `[N, C, H, W]` scaled to [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("dataset", format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let len = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("batch", format!("example {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let (images, labels) = self.batch(&(0..n).collect::<Vec<_>>())?;
        Dataset::new(images, labels, self.classes)
    }

    /// `(x − μ_c)/σ_c` per channel; constant channels are only centered.
    pub fn whiten(&self, stats: &MomentPair) -> Result<Dataset> {
        let (c, inner) = self.channel_layout();
        if stats.len() != c {
            return Err(Error::shape("whiten", format!("{} statistics for {c} channels", stats.len())));
        }
        let data = self.images.data();
        let out: Vec<f64> = (0..data.len())
            .map(|k| {
                let ch = (k / inner) % c;
                let sd = stats.var[ch].sqrt();
                let centered = f64::from(data[k]) - stats.mean[ch];
                if sd > 0.0 {
                    centered / sd
                } else {
                    centered
                }
            })
            .collect();
        Dataset::new(Tensor::from_f64(self.images.shape().to_vec(), &out)?, self.labels.clone(), self.classes)
    }

    /// Channels and values per channel in one example (features count as channels for flat examples).
    pub fn channel_layout(&self) -> (usize, usize) {
        let shape = self.example_shape();
        (shape[0], shape[1..].iter().product())
    }
}

/// Per-channel mean and variance over all examples and positions, plus
/// `noise_var` on the variance when additive noise augmentation is used.
pub fn dataset_stats(ds: &Dataset, noise_var: f64) -> Result<MomentPair> {
    if ds.len() < 2 {
        return Err(Error::invalid("dataset_stats", "need at least two examples"));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::invalid("dataset_stats", format!("noise variance {noise_var}")));
    }
    let (c, inner) = ds.channel_layout();
    let mut count = vec![0.0f64; c];
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    for (k, &v) in ds.images.data().iter().enumerate() {
        let ch = (k / inner) % c;
        let v = f64::from(v);
        count[ch] += 1.0;
        let d = v - mean[ch];
        mean[ch] += d / count[ch];
        m2[ch] += d * (v - mean[ch]);
    }
    let var = m2.iter().zip(&count).map(|(m, n)| m / n + noise_var).collect();
    MomentPair::new(mean, var)
}

/// Gaussian clusters with unit spread whose centers are `separation` apart.
///
/// Centers sit on scaled coordinate axes when `classes ≤ dim` (all pairwise
/// distances equal `separation`) and are random otherwise. Labels cycle
/// through the classes.
pub fn synthetic_blobs(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 || n < classes {
        return Err(Error::invalid("synthetic_blobs", format!("n={n}, classes={classes}, dim={dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            if classes <= dim {
                (0..dim).map(|j| if j == k { radius } else { 0.0 }).collect()
            } else {
                let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                g.iter().map(|v| v / norm * radius).collect()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((centers[l][j] + z) as f32);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Shuffled example order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ORDER_STREAM, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Number of batches per epoch; the last one may be partial.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}
