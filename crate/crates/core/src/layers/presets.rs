use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Activation, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::moments::MomentPair;
use crate::tensor::Tensor;

pub const CIFAR_KERNELS: [usize; 9] = [3, 3, 3, 3, 3, 3, 3, 1, 1];
pub const CIFAR_STRIDES: [usize; 9] = [1, 1, 2, 1, 1, 2, 1, 1, 1];
pub const CIFAR_CHANNELS: [usize; 9] = [96, 96, 96, 192, 192, 192, 192, 192, 10];
pub const CIFAR_SLOPE: f32 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    /// Independent `N(0, 1/fan_in)` entries.
    #[default]
    Normal,
    /// Orthonormal rows (or columns, when there are more rows than columns).
    Orthonormal,
}

fn weights(rows: usize, fan_in: usize, init: WeightInit, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gauss: Vec<f64> = (0..rows * fan_in).map(|_| StandardNormal.sample(rng)).collect();
    match init {
        WeightInit::Normal => {
            let sd = 1.0 / (fan_in as f64).sqrt();
            gauss.iter().map(|g| (g * sd) as f32).collect()
        }
        WeightInit::Orthonormal => orthonormalize(gauss, rows, fan_in).iter().map(|&v| v as f32).collect(),
    }
}

/// Modified Gram-Schmidt along the shorter side of a `rows × cols` matrix.
fn orthonormalize(mut m: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    let by_rows = rows <= cols;
    let (count, len) = if by_rows { (rows, cols) } else { (cols, rows) };
    let idx = |v: usize, k: usize| if by_rows { v * cols + k } else { k * cols + v };
    for v in 0..count {
        for u in 0..v {
            let dot: f64 = (0..len).map(|k| m[idx(v, k)] * m[idx(u, k)]).sum();
            for k in 0..len {
                m[idx(v, k)] -= dot * m[idx(u, k)];
            }
        }
        let norm = (0..len).map(|k| m[idx(v, k)].powi(2)).sum::<f64>().sqrt();
        for k in 0..len {
            m[idx(v, k)] /= norm;
        }
    }
    m
}

/// A fully connected stack: `Flatten`, then `Linear → activation` for every
/// hidden width, then `Linear → log_softmax`.
pub fn mlp(
    input_shape: Vec<usize>,
    hidden: &[usize],
    classes: usize,
    activation: Activation,
    init: WeightInit,
    seed: u64,
) -> Result<NetworkSpec> {
    if activation == Activation::LogSoftmax {
        return Err(Error::invalid("mlp", "log_softmax is not a hidden activation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = *input_shape.first().ok_or_else(|| Error::invalid("mlp", "empty input shape"))?;
    let mut width: usize = input_shape.iter().product();
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    for &h in hidden.iter().chain(std::iter::once(&classes)) {
        layers.push(LayerSpec::Linear {
            weight: Tensor::new(vec![h, width], weights(h, width, init, &mut rng))?,
            bias: Tensor::zeros(vec![h]),
        });
        layers.push(LayerSpec::Activation(activation));
        width = h;
    }
    *layers.last_mut().expect("at least one layer") = LayerSpec::Activation(Activation::LogSoftmax);
    NetworkSpec::new(input_shape, layers, MomentPair::standard(channels))
}

/// 784 → 6 hidden sigmoid layers of 20 → 10 on 1×28×28 images.
pub fn mnist_mlp(init: WeightInit, seed: u64) -> Result<NetworkSpec> {
    mlp(vec![1, 28, 28], &[20; 6], 10, Activation::Sigmoid, init, seed)
}

/// Nine conv layers with leaky ReLU, spatial average and log_softmax on
/// 3×32×32 images. 3×3 kernels are zero padded by one pixel.
pub fn cifar_cnn(init: WeightInit, seed: u64) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = 3;
    for (i, ((&k, &stride), &c_out)) in CIFAR_KERNELS.iter().zip(&CIFAR_STRIDES).zip(&CIFAR_CHANNELS).enumerate() {
        let fan_in = c_in * k * k;
        layers.push(LayerSpec::Conv {
            weight: Tensor::new(vec![c_out, c_in, k, k], weights(c_out, fan_in, init, &mut rng))?,
            bias: Tensor::zeros(vec![c_out]),
            stride,
            pad: k / 2,
        });
        if i + 1 < CIFAR_KERNELS.len() {
            layers.push(LayerSpec::Activation(Activation::LeakyRelu(CIFAR_SLOPE)));
        }
        c_in = c_out;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Activation(Activation::LogSoftmax));
    NetworkSpec::new(vec![3, 32, 32], layers, MomentPair::standard(3))
}
