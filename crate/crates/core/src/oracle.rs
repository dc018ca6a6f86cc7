//! Verification oracles that share no code path with the analytic formulas:
//! Monte-Carlo moment estimates and central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::moments::{MomentPair, MomentScalar, Pointwise};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Samples are drawn in this many independently seeded chunks; the chunks
/// double as the groups of the delete-a-group jackknife.
pub const MC_CHUNKS: usize = 100;

pub const MIN_SAMPLES: usize = 10_000;

/// Sample moments of `f(X)` with jackknife standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

impl McEstimate {
    /// Distance of an analytic value from the estimate, in standard errors.
    pub fn z_mean(&self, analytic: f64) -> f64 {
        (analytic - self.mean).abs() / self.se_mean.max(f64::MIN_POSITIVE)
    }

    pub fn z_var(&self, analytic: f64) -> f64 {
        (analytic - self.var).abs() / self.se_var.max(f64::MIN_POSITIVE)
    }
}

/// Running (count, mean, M2) that merges exactly.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&self, o: &Welford) -> Welford {
        let n = self.n + o.n;
        if n == 0.0 {
            return Welford::default();
        }
        let d = o.mean - self.mean;
        Welford { n, mean: self.mean + d * o.n / n, m2: self.m2 + o.m2 + d * d * self.n * o.n / n }
    }

    /// The accumulator with `o` taken back out.
    fn remove(&self, o: &Welford) -> Welford {
        let n = self.n - o.n;
        let mean = (self.n * self.mean - o.n * o.mean) / n;
        let d = o.mean - mean;
        Welford { n, mean, m2: (self.m2 - o.m2 - d * d * n * o.n / self.n).max(0.0) }
    }

    fn var(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}

fn jackknife(chunks: &[Welford]) -> McEstimate {
    let total = chunks.iter().fold(Welford::default(), |acc, c| acc.merge(c));
    let g = chunks.len() as f64;
    let loo: Vec<Welford> = chunks.iter().map(|c| total.remove(c)).collect();
    let spread = |vals: &[f64]| {
        let avg = vals.iter().sum::<f64>() / g;
        ((g - 1.0) / g * vals.iter().map(|v| (v - avg).powi(2)).sum::<f64>()).sqrt()
    };
    let means: Vec<f64> = loo.iter().map(|w| w.mean).collect();
    let vars: Vec<f64> = loo.iter().map(|w| w.var()).collect();
    McEstimate { mean: total.mean, var: total.var(), se_mean: spread(&means), se_var: spread(&vars) }
}

fn chunk_sizes(n_samples: usize) -> impl Iterator<Item = (usize, usize)> {
    let base = n_samples / MC_CHUNKS;
    let extra = n_samples % MC_CHUNKS;
    (0..MC_CHUNKS).map(move |c| (c, base + usize::from(c < extra)))
}

/// Samples `X ~ N(μ, σ²)` and returns the moments of `f(X)`.
pub fn mc_moments(f: Pointwise, input: MomentScalar, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::invalid("mc_moments", format!("need at least {MIN_SAMPLES} samples")));
    }
    let sigma = input.std();
    let chunks: Vec<Welford> = chunk_sizes(n_samples)
        .map(|(c, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d63, c as u64));
            let mut acc = Welford::default();
            for _ in 0..len {
                let z: f64 = StandardNormal.sample(&mut rng);
                acc.push(f.eval(input.mean + sigma * z));
            }
            acc
        })
        .collect();
    Ok(jackknife(&chunks))
}

/// Moments of a product `X·B`, `B ~ Bernoulli(keep_prob)`, `X ~ N(μ, σ²)`.
pub fn mc_dropout(input: MomentScalar, keep_prob: f64, n_samples: usize, seed: u64) -> Result<McEstimate> {
    use rand::Rng;
    if n_samples < MIN_SAMPLES {
        return Err(Error::invalid("mc_dropout", format!("need at least {MIN_SAMPLES} samples")));
    }
    let sigma = input.std();
    let chunks: Vec<Welford> = chunk_sizes(n_samples)
        .map(|(c, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6470, c as u64));
            let mut acc = Welford::default();
            for _ in 0..len {
                let z: f64 = StandardNormal.sample(&mut rng);
                let keep = rng.gen::<f64>() < keep_prob;
                acc.push(if keep { input.mean + sigma * z } else { 0.0 });
            }
            acc
        })
        .collect();
    Ok(jackknife(&chunks))
}

/// Moments of `max(X1, X2)` for independent Gaussians.
pub fn mc_max_pair(x1: MomentScalar, x2: MomentScalar, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::invalid("mc_max_pair", format!("need at least {MIN_SAMPLES} samples")));
    }
    let chunks: Vec<Welford> = chunk_sizes(n_samples)
        .map(|(c, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d78, c as u64));
            let mut acc = Welford::default();
            for _ in 0..len {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                acc.push((x1.mean + x1.std() * a).max(x2.mean + x2.std() * b));
            }
            acc
        })
        .collect();
    Ok(jackknife(&chunks))
}

/// How the inputs of [`mc_linear`] are jointly distributed.
#[derive(Debug, Clone, PartialEq)]
pub enum InputCovariance {
    /// Independent coordinates with the variances of the input pair.
    Independent,
    /// Full row-major `n×n` covariance; the input pair's variances are ignored.
    Full(Vec<f64>),
}

/// Per-output Monte-Carlo estimates of `W·X`.
#[derive(Debug, Clone, PartialEq)]
pub struct McLinear {
    pub outputs: Vec<McEstimate>,
}

/// Samples Gaussian inputs with the given means and covariance and measures
/// the moments of `W·X`.
pub fn mc_linear(weights: &Tensor, input: &MomentPair, covariance: &InputCovariance, n_samples: usize, seed: u64) -> Result<McLinear> {
    let &[n_out, n_in] = weights.shape() else {
        return Err(Error::shape("mc_linear", "weights must be 2-d"));
    };
    if n_in != input.len() {
        return Err(Error::shape("mc_linear", format!("{n_in} weight columns, {} inputs", input.len())));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::invalid("mc_linear", format!("need at least {MIN_SAMPLES} samples")));
    }
    let chol = match covariance {
        InputCovariance::Independent => {
            let mut l = vec![0.0; n_in * n_in];
            for i in 0..n_in {
                l[i * n_in + i] = input.var[i].sqrt();
            }
            l
        }
        InputCovariance::Full(cov) => cholesky(cov, n_in)?,
    };
    let w = weights.to_f64();
    let mut per_chunk: Vec<Vec<Welford>> = Vec::with_capacity(MC_CHUNKS);
    let mut z = vec![0.0; n_in];
    let mut x = vec![0.0; n_in];
    for (c, len) in chunk_sizes(n_samples) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6c69, c as u64));
        let mut acc = vec![Welford::default(); n_out];
        for _ in 0..len {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            for i in 0..n_in {
                x[i] = input.mean[i] + (0..=i).map(|j| chol[i * n_in + j] * z[j]).sum::<f64>();
            }
            for (o, a) in acc.iter_mut().enumerate() {
                a.push((0..n_in).map(|i| w[o * n_in + i] * x[i]).sum());
            }
        }
        per_chunk.push(acc);
    }
    let outputs = (0..n_out).map(|o| jackknife(&per_chunk.iter().map(|c| c[o]).collect::<Vec<_>>())).collect();
    Ok(McLinear { outputs })
}

/// Lower Cholesky factor of a positive semi-definite matrix; zero pivots
/// (perfectly correlated coordinates) are allowed.
fn cholesky(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    if cov.len() != n * n {
        return Err(Error::invalid("mc_linear", format!("covariance must be {n}×{n}")));
    }
    for i in 0..n {
        for j in 0..i {
            if (cov[i * n + j] - cov[j * n + i]).abs() > 1e-12 * (1.0 + cov[i * n + j].abs()) {
                return Err(Error::invalid("mc_linear", "covariance is not symmetric"));
            }
        }
    }
    let scale = (0..n).map(|i| cov[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let d = cov[j * n + j] - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if d < -1e-10 * scale {
            return Err(Error::invalid("mc_linear", "covariance is not positive semi-definite"));
        }
        let d = d.max(0.0).sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let s = cov[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = if d > 1e-12 * scale.sqrt() { s / d } else { 0.0 };
        }
    }
    // the factor must reproduce the matrix, otherwise it was indefinite
    for i in 0..n {
        for j in 0..=i {
            let r: f64 = (0..=j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if (r - cov[i * n + j]).abs() > 1e-8 * scale {
                return Err(Error::invalid("mc_linear", "covariance is not positive semi-definite"));
            }
        }
    }
    Ok(l)
}

/// Central differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad(f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Result<Vec<f64>> {
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_coords(f, point, &coords, h)
}

/// Central differences for a subset of coordinates, in the order given.
pub fn finite_diff_coords(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_grad", format!("step {h} must be positive")));
    }
    let mut probe = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            for (v, sign) in [(up, '+'), (down, '-')] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("finite difference probe {sign}h at coordinate {i}"),
                        index: i,
                        value: v,
                    });
                }
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}
