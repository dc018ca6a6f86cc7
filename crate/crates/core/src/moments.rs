//! Propagation of (mean, variance) through linear maps and coordinate-wise
//! nonlinearities, assuming Gaussian inputs.
//!
//! ReLU and leaky ReLU use closed forms in `a = μ/σ`. Sigmoid uses fixed
//! quadrature rules: Gauss–Hermite for narrow inputs and, for wide inputs, a
//! split into the Heaviside step (exact) plus two exponentially decaying tails
//! integrated with Gauss–Laguerre. Every nonlinearity also exposes the exact
//! Jacobian of its computed output w.r.t. `(mean, variance)`, used by the tape.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn phi_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function, relative-accurate in the lower tail.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Mean and variance of a scalar Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentScalar {
    pub mean: f64,
    pub var: f64,
}

impl MomentScalar {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() || !var.is_finite() {
            return Err(Error::invalid("MomentScalar", format!("non-finite moments ({mean}, {var})")));
        }
        if var < 0.0 {
            return Err(Error::invalid("MomentScalar", format!("negative variance {var}")));
        }
        Ok(MomentScalar { mean, var })
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// Per-unit means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl MomentPair {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("MomentPair", format!("{} means vs {} variances", mean.len(), var.len())));
        }
        if let Some(v) = var.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("MomentPair", format!("invalid variance {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("MomentPair", "non-finite mean"));
        }
        Ok(MomentPair { mean, var })
    }

    /// `n` units with identical statistics.
    pub fn uniform(n: usize, mean: f64, var: f64) -> Self {
        MomentPair { mean: vec![mean; n], var: vec![var; n] }
    }

    pub fn standard(n: usize) -> Self {
        Self::uniform(n, 0.0, 1.0)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn get(&self, i: usize) -> MomentScalar {
        MomentScalar { mean: self.mean[i], var: self.var[i] }
    }

    pub fn map(&self, f: impl Fn(MomentScalar) -> MomentScalar) -> MomentPair {
        let (mean, var) = (0..self.len())
            .map(|i| {
                let m = f(self.get(i));
                (m.mean, m.var)
            })
            .unzip();
        MomentPair { mean, var }
    }
}

/// Partial derivatives of an output `(mean', var')` w.r.t. an input `(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MomentJacobian {
    pub dmean_dmean: f64,
    pub dmean_dvar: f64,
    pub dvar_dmean: f64,
    pub dvar_dvar: f64,
}

impl MomentJacobian {
    pub const IDENTITY: MomentJacobian = MomentJacobian { dmean_dmean: 1.0, dmean_dvar: 0.0, dvar_dmean: 0.0, dvar_dvar: 1.0 };
}

/// Mean' = W·mean + bias, var'_o = Σ_i W[o,i]²·var_i (diagonal covariance).
pub fn linear_moments(input: &MomentPair, weights: &Tensor, bias: &Tensor) -> Result<MomentPair> {
    let &[n_out, n_in] = weights.shape() else {
        return Err(Error::shape("linear_moments", format!("weights must be 2-d, got {:?}", weights.shape())));
    };
    if n_in != input.len() || bias.len() != n_out {
        return Err(Error::shape(
            "linear_moments",
            format!("weights {:?}, bias {:?}, input of {} units", weights.shape(), bias.shape(), input.len()),
        ));
    }
    let (mean, var) = linear_moments_raw(&input.mean, &input.var, &weights.to_f64(), &bias.to_f64(), n_out);
    Ok(MomentPair { mean, var })
}

pub(crate) fn linear_moments_raw(mean: &[f64], var: &[f64], weights: &[f64], bias: &[f64], n_out: usize) -> (Vec<f64>, Vec<f64>) {
    let n_in = mean.len();
    let mut out_mean = Vec::with_capacity(n_out);
    let mut out_var = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let row = &weights[o * n_in..(o + 1) * n_in];
        let mut m = bias[o];
        let mut v = 0.0;
        for i in 0..n_in {
            m += row[i] * mean[i];
            v += row[i] * row[i] * var[i];
        }
        out_mean.push(m);
        out_var.push(v);
    }
    (out_mean, out_var)
}

/// A coordinate-wise function whose Gaussian moments are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pointwise {
    Identity,
    Relu,
    /// `max(0,x) + slope·min(0,x)`.
    LeakyRelu(f64),
    Sigmoid,
}

impl Pointwise {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Pointwise::Identity => x,
            Pointwise::Relu => x.max(0.0),
            Pointwise::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Pointwise::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Pointwise::Identity => 1.0,
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Pointwise::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn moments(self, x: MomentScalar) -> MomentScalar {
        self.moments_with_jacobian(x).0
    }

    pub fn moments_with_jacobian(self, x: MomentScalar) -> (MomentScalar, MomentJacobian) {
        match self {
            Pointwise::Identity => (x, MomentJacobian::IDENTITY),
            Pointwise::Relu => relu_with_jacobian(x),
            Pointwise::LeakyRelu(s) => leaky_relu_with_jacobian(x, s),
            Pointwise::Sigmoid => sigmoid_with_jacobian(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pointwise::Identity => "identity",
            Pointwise::Relu => "relu",
            Pointwise::LeakyRelu(_) => "leaky_relu",
            Pointwise::Sigmoid => "sigmoid",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ReLU moments: `μ' = μΦ(a) + σφ(a)`, `σ'² = σ²R(a)` with
/// `R(a) = aφ(a) + (a²+1)Φ(a) − (aΦ(a)+φ(a))²`.
pub fn relu_moments(x: MomentScalar) -> MomentScalar {
    relu_with_jacobian(x).0
}

/// The variance-transfer function `R(a)`, unclamped.
pub fn relu_variance_factor(a: f64) -> f64 {
    let (cdf, pdf) = (phi_cdf(a), phi_pdf(a));
    let t = a * cdf + pdf;
    a * pdf + (a * a + 1.0) * cdf - t * t
}

fn relu_with_jacobian(x: MomentScalar) -> (MomentScalar, MomentJacobian) {
    if x.var == 0.0 {
        let on = if x.mean > 0.0 { 1.0 } else { 0.0 };
        return (
            MomentScalar { mean: x.mean.max(0.0), var: 0.0 },
            MomentJacobian { dmean_dmean: on, dmean_dvar: 0.0, dvar_dmean: 0.0, dvar_dvar: on },
        );
    }
    let sigma = x.std();
    let a = x.mean / sigma;
    let (cdf, pdf) = (phi_cdf(a), phi_pdf(a));
    // cancels in the far lower tail; the true value is positive
    let mean = (x.mean * cdf + sigma * pdf).max(0.0);
    let r = relu_variance_factor(a);
    let (var, dvar_dmean, dvar_dvar) =
        if r > 0.0 { (x.var * r, 2.0 * mean * (1.0 - cdf), cdf - mean * pdf / sigma) } else { (0.0, 0.0, 0.0) };
    (MomentScalar { mean, var }, MomentJacobian { dmean_dmean: cdf, dmean_dvar: pdf / (2.0 * sigma), dvar_dmean, dvar_dvar })
}

/// Leaky ReLU `max(0,x) + slope·min(0,x)`, written as `(1−s)·relu(x) + s·x`.
pub fn leaky_relu_moments(x: MomentScalar, slope: f64) -> Result<MomentScalar> {
    if !(0.0..1.0).contains(&slope) && slope != 1.0 {
        return Err(Error::invalid("leaky_relu_moments", format!("slope {slope} outside [0, 1]")));
    }
    Ok(leaky_relu_with_jacobian(x, slope).0)
}

fn leaky_relu_with_jacobian(x: MomentScalar, slope: f64) -> (MomentScalar, MomentJacobian) {
    let (r, jr) = relu_with_jacobian(x);
    let s = slope;
    let k = 1.0 - s;
    let mean = k * r.mean + s * x.mean;
    // var = k²·var_r + s²·var + 2sk·Cov(relu(X), X), Cov = var_r + m_r(m_r − μ)
    let gap = r.mean - x.mean;
    let cov = r.var + r.mean * gap;
    let var = k * k * r.var + s * s * x.var + 2.0 * s * k * cov;
    let dcov_dmean = jr.dvar_dmean + jr.dmean_dmean * (2.0 * r.mean - x.mean) - r.mean;
    let dcov_dvar = jr.dvar_dvar + jr.dmean_dvar * (2.0 * r.mean - x.mean);
    let jac = MomentJacobian {
        dmean_dmean: k * jr.dmean_dmean + s,
        dmean_dvar: k * jr.dmean_dvar,
        dvar_dmean: k * k * jr.dvar_dmean + 2.0 * s * k * dcov_dmean,
        dvar_dvar: k * k * jr.dvar_dvar + s * s + 2.0 * s * k * dcov_dvar,
    };
    if var > 0.0 {
        (MomentScalar { mean, var }, jac)
    } else {
        (MomentScalar { mean, var: 0.0 }, MomentJacobian { dvar_dmean: 0.0, dvar_dvar: 0.0, ..jac })
    }
}

/// Number of nodes in both quadrature rules used for the sigmoid.
pub const QUADRATURE_ORDER: usize = 32;

/// Above this input standard deviation the sigmoid switches from Gauss–Hermite
/// to the step-plus-Laguerre-tails rule.
pub const SIGMOID_WIDE_SIGMA: f64 = 1.25;

pub fn sigmoid_moments(x: MomentScalar) -> MomentScalar {
    sigmoid_with_jacobian(x).0
}

fn sigmoid_with_jacobian(x: MomentScalar) -> (MomentScalar, MomentJacobian) {
    if x.var == 0.0 {
        let s = sigmoid(x.mean);
        let d1 = s * (1.0 - s);
        let d2 = d1 * (1.0 - 2.0 * s);
        return (
            MomentScalar { mean: s, var: 0.0 },
            MomentJacobian { dmean_dmean: d1, dmean_dvar: 0.5 * d2, dvar_dmean: 0.0, dvar_dvar: d1 * d1 },
        );
    }
    let sigma = x.std();
    // d/dvar = d/dsigma / (2 sigma)
    let (mean, dm_dmu, dm_dsigma, var, dv_dmu, dv_dsigma) =
        if sigma <= SIGMOID_WIDE_SIGMA { sigmoid_hermite(x.mean, sigma) } else { sigmoid_laguerre(x.mean, sigma) };
    let to_var = 1.0 / (2.0 * sigma);
    let jac = MomentJacobian { dmean_dmean: dm_dmu, dmean_dvar: dm_dsigma * to_var, dvar_dmean: dv_dmu, dvar_dvar: dv_dsigma * to_var };
    if var > 0.0 {
        (MomentScalar { mean, var }, jac)
    } else {
        (MomentScalar { mean, var: 0.0 }, MomentJacobian { dvar_dmean: 0.0, dvar_dvar: 0.0, ..jac })
    }
}

/// Returns (mean, dmean/dμ, dmean/dσ, var, dvar/dμ, dvar/dσ).
fn sigmoid_hermite(mu: f64, sigma: f64) -> (f64, f64, f64, f64, f64, f64) {
    let rule = gauss_hermite();
    let mut mean = 0.0;
    let mut dm_dmu = 0.0;
    let mut dm_dsigma = 0.0;
    let mut vals = [0.0; QUADRATURE_ORDER];
    let mut ders = [0.0; QUADRATURE_ORDER];
    for (k, (&t, &w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let z = SQRT_2 * t;
        let s = sigmoid(mu + sigma * z);
        let d = s * (1.0 - s);
        vals[k] = s;
        ders[k] = d;
        mean += w * s;
        dm_dmu += w * d;
        dm_dsigma += w * d * z;
    }
    let mut var = 0.0;
    let mut dv_dmu = 0.0;
    let mut dv_dsigma = 0.0;
    for (k, (&t, &w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let c = vals[k] - mean;
        var += w * c * c;
        dv_dmu += 2.0 * w * c * ders[k];
        dv_dsigma += 2.0 * w * c * ders[k] * SQRT_2 * t;
    }
    (mean, dm_dmu, dm_dsigma, var, dv_dmu, dv_dsigma)
}

/// E[f(X)] = P(X > 0) + ∫₀^∞ (f(y) − 1)p(y) dy + ∫₀^∞ f(−y)p(−y) dy, where both
/// tails carry a factor e^{−y} that Gauss–Laguerre absorbs. Same for f².
fn sigmoid_laguerre(mu: f64, sigma: f64) -> (f64, f64, f64, f64, f64, f64) {
    let rule = gauss_laguerre();
    let a = mu / sigma;
    let step = phi_cdf(a);
    let step_pdf = phi_pdf(a) / sigma;
    let (mut m, mut m_mu, mut m_sigma) = (step, step_pdf, -step_pdf * a);
    let (mut s2, mut s2_mu, mut s2_sigma) = (step, step_pdf, -step_pdf * a);
    for (&y, &u) in rule.nodes.iter().zip(&rule.weights) {
        let sp = sigmoid(y);
        let sn = 1.0 - sp;
        // Gaussian density at ±y and its partials.
        let density = |x: f64| {
            let z = (x - mu) / sigma;
            let p = phi_pdf(z) / sigma;
            (p, p * z / sigma, p * (z * z - 1.0) / sigma)
        };
        let (pp, pp_mu, pp_sigma) = density(y);
        let (pn, pn_mu, pn_sigma) = density(-y);
        // mean tails: sig(y)·[p(−y) − p(y)]
        m += u * sp * (pn - pp);
        m_mu += u * sp * (pn_mu - pp_mu);
        m_sigma += u * sp * (pn_sigma - pp_sigma);
        // second-moment tails: sig(y)sig(−y)·p(−y) − sig(y)(1+sig(y))·p(y)
        let cn = sp * sn;
        let cp = sp * (1.0 + sp);
        s2 += u * (cn * pn - cp * pp);
        s2_mu += u * (cn * pn_mu - cp * pp_mu);
        s2_sigma += u * (cn * pn_sigma - cp * pp_sigma);
    }
    let var = s2 - m * m;
    (m, m_mu, m_sigma, var, s2_mu - 2.0 * m * m_mu, s2_sigma - 2.0 * m * m_sigma)
}

/// Clark's moments of `max(X1, X2)` for independent Gaussians.
pub fn max_pair_moments(x1: MomentScalar, x2: MomentScalar) -> MomentScalar {
    let theta = (x1.var + x2.var).sqrt();
    if theta == 0.0 {
        return MomentScalar { mean: x1.mean.max(x2.mean), var: 0.0 };
    }
    let alpha = (x1.mean - x2.mean) / theta;
    let (cp, cn, pdf) = (phi_cdf(alpha), phi_cdf(-alpha), phi_pdf(alpha));
    let mean = x1.mean * cp + x2.mean * cn + theta * pdf;
    let second = (x1.mean * x1.mean + x1.var) * cp + (x2.mean * x2.mean + x2.var) * cn + (x1.mean + x2.mean) * theta * pdf;
    MomentScalar { mean, var: (second - mean * mean).max(0.0) }
}

/// Moments of `X·B` with `B ~ Bernoulli(keep_prob)`.
pub fn dropout_moments(x: MomentScalar, keep_prob: f64) -> Result<MomentScalar> {
    dropout_moments_scaled(x, keep_prob, 1.0)
}

/// Moments of `scale·X·B`; `scale = 1/keep_prob` gives inverted dropout.
pub fn dropout_moments_scaled(x: MomentScalar, keep_prob: f64, scale: f64) -> Result<MomentScalar> {
    check_keep_prob(keep_prob)?;
    Ok(dropout_with_jacobian(x, keep_prob, scale).0)
}

pub(crate) fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("dropout", format!("keep probability {keep_prob} outside (0, 1]")))
    }
}

pub(crate) fn dropout_with_jacobian(x: MomentScalar, p: f64, scale: f64) -> (MomentScalar, MomentJacobian) {
    let c2 = scale * scale;
    let mean = scale * p * x.mean;
    let var = c2 * (p * x.var + p * (1.0 - p) * x.mean * x.mean);
    (
        MomentScalar { mean, var },
        MomentJacobian { dmean_dmean: scale * p, dmean_dvar: 0.0, dvar_dmean: 2.0 * c2 * p * (1.0 - p) * x.mean, dvar_dvar: c2 * p },
    )
}

/// Nodes and weights of a Gauss quadrature rule.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss–Hermite rule normalized to the standard normal: `E[g(Z)] ≈ Σ w_k g(√2·t_k)`.
pub fn gauss_hermite() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let mut rule = hermite_rule(QUADRATURE_ORDER);
        for w in &mut rule.weights {
            *w /= PI.sqrt();
        }
        rule
    })
}

/// Gauss–Laguerre rule for `∫₀^∞ e^{−y} g(y) dy`.
pub fn gauss_laguerre() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| laguerre_rule(QUADRATURE_ORDER))
}

/// Physicists' Gauss–Hermite rule by Newton iteration on the orthonormal recurrence.
fn hermite_rule(n: usize) -> QuadratureRule {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^(−1/4)
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // ascending order
    nodes.reverse();
    weights.reverse();
    QuadratureRule { nodes, weights }
}

/// Gauss–Laguerre rule (α = 0) by Newton iteration on the three-term recurrence.
fn laguerre_rule(n: usize) -> QuadratureRule {
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n {
        z = match i {
            0 => 3.0 / (1.0 + 2.4 * nf),
            1 => z + 15.0 / (1.0 + 2.5 * nf),
            _ => {
                let ai = (i - 1) as f64;
                z + ((1.0 + 2.55 * ai) / (1.9 * ai)) * (z - nodes[i - 2])
            }
        };
        let mut pp = 0.0;
        let mut p2 = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0 - z) * p2 - jf * p3) / (jf + 1.0);
            }
            pp = (nf * p1 - nf * p2) / z;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        weights[i] = -1.0 / (pp * nf * p2);
    }
    QuadratureRule { nodes, weights }
}
