//! Verification suites that compare the analytic machinery with independent
//! oracles: Monte-Carlo moments, finite differences and explicit propagation.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::synthetic_blobs;
use crate::error::{Error, Result};
use crate::layers::{
    analytic_stats, cifar_cnn, forward_tape, introduce_normalization, mlp, mnist_mlp, strip_normalization, Activation, ForwardOptions,
    InitMode, LayerSpec, NetworkSpec, NormMode, NormRecord, ParamRole, WeightInit,
};
use crate::moments::{
    dropout_moments, leaky_relu_moments, linear_moments, max_pair_moments, relu_moments, sigmoid_moments, MomentPair, MomentScalar,
    Pointwise,
};
use crate::optim::{prepare, train, InitProtocol, TrainConfig};
use crate::oracle::{finite_diff_coords, mc_dropout, mc_linear, mc_max_pair, mc_moments, InputCovariance, McEstimate};
use crate::seed::derive_seed;
use crate::tensor::{kernels, ConvGeometry, Tensor};

/// Standardized means `μ/σ` of the moment grid.
pub const GRID_A: [f64; 7] = [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0];
pub const GRID_SIGMA: [f64; 3] = [0.1, 1.0, 10.0];
/// Largest accepted distance from a Monte-Carlo estimate, in standard errors.
pub const Z_LIMIT: f64 = 4.0;
pub const GRAD_REL_LIMIT: f64 = 1e-3;
/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

/// What a measured value must satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Within(f64, f64),
    /// Reported only.
    Report,
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Bound::AtMost(l) => v <= l,
            Bound::AtLeast(l) => v >= l,
            Bound::Within(lo, hi) => v >= lo && v <= hi,
            Bound::Report => true,
        }
    }

    /// Distance to the nearest violation; positive when the bound holds.
    pub fn margin(self, v: f64) -> Option<f64> {
        match self {
            Bound::AtMost(l) => Some(l - v),
            Bound::AtLeast(l) => Some(v - l),
            Bound::Within(lo, hi) => Some((v - lo).min(hi - v)),
            Bound::Report => None,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::AtMost(l) => write!(f, "<= {l:e}"),
            Bound::AtLeast(l) => write!(f, ">= {l:e}"),
            Bound::Within(lo, hi) => write!(f, "in [{lo}, {hi}]"),
            Bound::Report => f.write_str("reported"),
        }
    }
}

/// One measured quantity and its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, bound: Bound) -> Self {
        Check { name: name.into(), measured, bound }
    }

    pub fn passed(&self) -> bool {
        !self.measured.is_nan() && self.bound.holds(self.measured)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.bound, self.passed()) {
            (Bound::Report, _) => "info",
            (_, true) => "ok",
            (_, false) => "FAIL",
        };
        write!(f, "{status:<4} {}: {:.6e} ({})", self.name, self.measured, self.bound)?;
        if let Some(m) = self.bound.margin(self.measured) {
            write!(f, ", margin {m:.3e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Moments,
    Gradients,
    Invariances,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Moments, Suite::Gradients, Suite::Invariances];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Moments => "moments",
            Suite::Gradients => "gradients",
            Suite::Invariances => "invariances",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid("suite", format!("unknown suite {s:?} (moments|gradients|invariances)")))
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {}", self.suite)?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        write!(f, "{}: {} checks, {failed} failed", if failed == 0 { "PASS" } else { "FAIL" }, self.checks.len())
    }
}

/// ReLU moment rule under test; replaceable to confirm the suite catches errors.
pub type ReluRule = fn(MomentScalar) -> MomentScalar;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte-Carlo samples per grid point.
    pub samples: usize,
    pub relu: ReluRule,
    /// Coordinates checked per parameter tensor.
    pub grad_coords: usize,
    /// Batch sizes of the MLP and CNN gradient checks.
    pub grad_batch: usize,
    pub cnn_batch: usize,
    /// Height and width of the CNN input in gradient checks.
    pub cnn_spatial: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, samples: 1_000_000, relu: relu_moments, grad_coords: 5, grad_batch: 8, cnn_batch: 2, cnn_spatial: 6 }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Report> {
    let checks = match suite {
        Suite::Moments => {
            let mut c = relu_reference_checks(opts.relu);
            c.extend(moment_checks(opts)?);
            c
        }
        Suite::Gradients => gradient_checks(opts)?,
        Suite::Invariances => {
            let mut c = invariance_checks(opts.seed)?;
            c.extend(projection_checks(opts.seed)?);
            c.extend(equivalence_checks(opts.seed)?);
            c.extend(collapse_checks(opts.seed)?);
            c.extend(train_eval_checks(opts.seed)?);
            c
        }
    };
    Ok(Report { suite, checks })
}

/// Closed-form ReLU values at `(0, 1)` and `(3, 1)`.
pub fn relu_reference_checks(relu: ReluRule) -> Vec<Check> {
    let at = |m: f64| relu(MomentScalar { mean: m, var: 1.0 });
    let (a, b) = (at(0.0), at(3.0));
    vec![
        Check::new("relu(0,1) mean vs 0.39894", (a.mean - 0.39894).abs(), Bound::AtMost(1e-4)),
        Check::new("relu(0,1) variance vs 0.34085", (a.var - 0.34085).abs(), Bound::AtMost(1e-4)),
        Check::new("relu(3,1) mean vs 3.00038", (b.mean - 3.00038).abs(), Bound::AtMost(1e-3)),
        Check::new("relu(3,1) variance vs 0.99751", (b.var - 0.99751).abs(), Bound::AtMost(1e-3)),
    ]
}

struct WorstZ {
    samples: f64,
    mean: f64,
    var: f64,
}

impl WorstZ {
    fn new(samples: usize) -> Self {
        WorstZ { samples: samples as f64, mean: 0.0, var: 0.0 }
    }

    /// z-scores with each standard error floored at its Gaussian-model value,
    /// which stops rare-event grid points from reporting a zero error.
    fn add(&mut self, analytic: MomentScalar, mc: &McEstimate) {
        let floored = McEstimate {
            se_mean: mc.se_mean.max((analytic.var / self.samples).sqrt()),
            se_var: mc.se_var.max(analytic.var * (2.0 / self.samples).sqrt()),
            ..*mc
        };
        self.mean = self.mean.max(floored.z_mean(analytic.mean));
        self.var = self.var.max(floored.z_var(analytic.var));
    }

    fn checks(&self, op: &str) -> [Check; 2] {
        [
            Check::new(format!("{op} mean |z|"), self.mean, Bound::AtMost(Z_LIMIT)),
            Check::new(format!("{op} variance |z|"), self.var, Bound::AtMost(Z_LIMIT)),
        ]
    }
}

/// Every moment rule against Monte Carlo over `μ = aσ` for the grid.
pub fn moment_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let n = opts.samples;
    let mut checks = Vec::new();
    let grid: Vec<MomentScalar> =
        GRID_SIGMA.iter().flat_map(|&s| GRID_A.iter().map(move |&a| MomentScalar { mean: a * s, var: s * s })).collect();
    let seed = |op: u64, k: usize| derive_seed(opts.seed, op, k as u64);

    let pointwise: [(&str, Pointwise, &dyn Fn(MomentScalar) -> Result<MomentScalar>); 4] = [
        ("relu", Pointwise::Relu, &|x| Ok((opts.relu)(x))),
        ("leaky_relu(0.03)", Pointwise::LeakyRelu(0.03), &|x| leaky_relu_moments(x, 0.03)),
        ("leaky_relu(0.2)", Pointwise::LeakyRelu(0.2), &|x| leaky_relu_moments(x, 0.2)),
        ("sigmoid", Pointwise::Sigmoid, &|x| Ok(sigmoid_moments(x))),
    ];
    for (op, (name, f, rule)) in pointwise.iter().enumerate() {
        let mut worst = WorstZ::new(n);
        for (k, &x) in grid.iter().enumerate() {
            worst.add(rule(x)?, &mc_moments(*f, x, n, seed(op as u64, k))?);
        }
        checks.extend(worst.checks(name));
    }

    let mut worst = WorstZ::new(n);
    for (k, &x) in grid.iter().enumerate() {
        worst.add(dropout_moments(x, 0.8)?, &mc_dropout(x, 0.8, n, seed(10, k))?);
    }
    checks.extend(worst.checks("dropout(keep 0.8)"));

    let mut worst = WorstZ::new(n);
    for (k, &x) in grid.iter().enumerate() {
        let other = MomentScalar { mean: 0.5 * x.std(), var: 0.5 * x.var };
        worst.add(max_pair_moments(x, other), &mc_max_pair(x, other, n, seed(11, k))?);
    }
    checks.extend(worst.checks("max of two"));

    let weights = Tensor::new(vec![2, 3], vec![0.8, -1.2, 0.3, 0.5, 0.25, -2.0])?;
    let bias = Tensor::zeros(vec![2]);
    let mut worst = WorstZ::new(n);
    for (k, &x) in grid.iter().enumerate() {
        let input = MomentPair::new(vec![x.mean, -0.5 * x.mean, 2.0 * x.mean], vec![x.var, 0.25 * x.var, 4.0 * x.var])?;
        let analytic = linear_moments(&input, &weights, &bias)?;
        let mc = mc_linear(&weights, &input, &InputCovariance::Independent, n, seed(12, k))?;
        for (o, est) in mc.outputs.iter().enumerate() {
            worst.add(analytic.get(o), est);
        }
    }
    checks.extend(worst.checks("linear"));
    Ok(checks)
}

fn gaussian_batch(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn with_input_shape(net: NetworkSpec, shape: Vec<usize>) -> Result<NetworkSpec> {
    NetworkSpec::new(shape, net.layers, net.input_stats)
}

/// Largest relative error between tape gradients and central differences
/// over a random subset of coordinates of every parameter tensor.
pub fn gradient_error(net: &NetworkSpec, batch: &Tensor, labels: &[usize], detach: bool, coords: usize, seed: u64) -> Result<f64> {
    let params = net.param_values();
    let opts = ForwardOptions { training: true, detach_stats: detach, seed };
    let (_, grads, records) = net.loss_and_grads_at(&params, batch, labels, opts)?;
    let fixed: &[NormRecord] = if detach { &records } else { &[] };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let picked = sample(&mut rng, g.len(), coords.min(g.len())).into_vec();
        let mut probe = params.clone();
        let numeric = finite_diff_coords(
            |v| {
                probe[k].copy_from_slice(v);
                net.loss_with_stats(&probe, batch, labels, true, fixed).unwrap_or(f64::NAN)
            },
            &params[k],
            &picked,
            FD_STEP,
        )?;
        for (&i, &fd) in picked.iter().zip(&numeric) {
            let denom = g[i].abs().max(fd.abs()).max(GRAD_FLOOR);
            worst = worst.max((g[i] - fd).abs() / denom);
        }
    }
    Ok(worst)
}

fn normalized(base: &NetworkSpec, mode: NormMode, batch: &Tensor, seed: u64) -> Result<NetworkSpec> {
    if mode == NormMode::None {
        return Ok(base.clone());
    }
    introduce_normalization(base, mode, InitMode::ProjectingRandomScale, Some(batch), seed)
}

/// Gradient checks of both presets in every normalization mode, with and
/// without detached statistics. The CNN runs on a reduced spatial size.
pub fn gradient_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 20, 0));
    let s = opts.cnn_spatial;
    let presets = [
        ("mnist_mlp", mnist_mlp(WeightInit::Normal, opts.seed)?, opts.grad_batch),
        ("cifar_cnn", with_input_shape(cifar_cnn(WeightInit::Normal, opts.seed)?, vec![3, s, s])?, opts.cnn_batch),
    ];
    let mut checks = Vec::new();
    for (name, base, n) in presets {
        let mut shape = vec![n];
        shape.extend_from_slice(&base.input_shape);
        let batch = gaussian_batch(shape, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        for mode in NormMode::ALL {
            let net = normalized(&base, mode, &batch, opts.seed)?;
            for detach in [false, true] {
                let err = gradient_error(&net, &batch, &labels, detach, opts.grad_coords, derive_seed(opts.seed, 21, 0))?;
                let label = format!("{name} {mode} detach={detach} max relative error");
                checks.push(Check::new(label, err, Bound::AtMost(GRAD_REL_LIMIT)));
            }
        }
    }
    Ok(checks)
}

fn invariance_net(mode: NormMode, eps: f64, seed: u64) -> Result<NetworkSpec> {
    let mut net = mlp(vec![6], &[5], 3, Activation::Relu, WeightInit::Normal, seed)?;
    net.input_stats = MomentPair::new(vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4], vec![1.0, 0.5, 2.0, 1.5, 0.8, 1.2])?;
    let mut state = crate::layers::NormState::new(mode, 5);
    state.eps = eps;
    net.layers.insert(1, LayerSpec::Norm(state));
    net.layer_shapes()?;
    Ok(net)
}

fn scaled_params(net: &NetworkSpec, alpha: f64, shift: f64) -> Vec<Vec<f64>> {
    let mut params = net.param_values();
    for (r, p) in net.param_refs().iter().zip(&mut params) {
        if r.layer == 0 {
            match r.role {
                ParamRole::Weight => p.iter_mut().for_each(|v| *v *= alpha),
                ParamRole::Bias => p.iter_mut().for_each(|v| *v += shift),
                _ => {}
            }
        }
    }
    params
}

/// `W → αW`, `bias → bias + c` in front of AP2, BN and WN layers: the
/// normalized output stays put while the weight gradient moves.
pub fn invariance_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 30, 0));
    let batch = gaussian_batch(vec![16, 6], &mut rng);
    let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..3)).collect();
    let mut checks = Vec::new();
    for mode in [NormMode::Ap2, NormMode::Bn, NormMode::Wn] {
        for (eps, bound) in [(0.0, Bound::AtMost(1e-5)), (crate::layers::DEFAULT_EPS, Bound::Report)] {
            let net = invariance_net(mode, eps, seed)?;
            let norm_out = |params: &[Vec<f64>]| -> Result<Vec<f64>> {
                let fwd = forward_tape(&net, params, &batch, ForwardOptions::default())?;
                Ok(fwd.tape.value(fwd.layer_outputs[1]).to_vec())
            };
            let weight_grad = |params: &[Vec<f64>]| -> Result<Vec<f64>> {
                Ok(net.loss_and_grads_at(params, &batch, &labels, ForwardOptions::default())?.1[0].clone())
            };
            let base = net.param_values();
            let (y0, g0) = (norm_out(&base)?, weight_grad(&base)?);
            let (mut dy, mut dg) = (0.0f64, f64::INFINITY);
            for alpha in [0.1, 2.0, 10.0] {
                let p = scaled_params(&net, alpha, 0.7);
                dy = dy.max(max_abs_diff(&norm_out(&p)?, &y0));
                dg = dg.min(max_abs_diff(&weight_grad(&p)?, &g0));
            }
            checks.push(Check::new(format!("{mode} eps={eps:e} normalized output change"), dy, bound));
            if eps == 0.0 {
                checks.push(Check::new(format!("{mode} smallest weight gradient change"), dg, Bound::AtLeast(1e-8)));
            }
        }
    }
    Ok(checks)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Projecting AP2 introduction on the sigmoid MLP: analytic (0, 1) in front
/// of every sigmoid, and sampled statistics close to it at the first one.
pub fn projection_checks(seed: u64) -> Result<Vec<Check>> {
    let net = introduce_normalization(&mnist_mlp(WeightInit::Normal, seed)?, NormMode::Ap2, InitMode::Projecting, None, seed)?;
    let stats = analytic_stats(&net)?;
    let sigmoids: Vec<usize> =
        net.layers.iter().enumerate().filter(|(_, l)| matches!(l, LayerSpec::Activation(Activation::Sigmoid))).map(|(i, _)| i).collect();
    let mut dev = 0.0f64;
    for &i in &sigmoids {
        let p = stats.entering(i).expect("inside the analytic pass");
        for k in 0..p.len() {
            dev = dev.max(p.mean[k].abs()).max((p.var[k] - 1.0).abs());
        }
    }
    let mut checks = vec![Check::new(
        format!("analytic stats entering {} sigmoids, max deviation from (0,1)", sigmoids.len()),
        dev,
        Bound::AtMost(1e-12),
    )];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 40, 0));
    let batch = gaussian_batch(vec![10_000, 1, 28, 28], &mut rng);
    let fwd = forward_tape(&net, &net.param_values(), &batch, ForwardOptions::default())?;
    for (depth, &i) in sigmoids.iter().enumerate() {
        let v = fwd.tape.value(fwd.layer_outputs[i - 1]);
        let units = v.len() / 10_000;
        let (mut worst_mean, mut lo, mut hi) = (0.0f64, f64::INFINITY, 0.0f64);
        for u in 0..units {
            let col: Vec<f64> = v.iter().skip(u).step_by(units).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            worst_mean = worst_mean.max(m.abs());
            lo = lo.min(var);
            hi = hi.max(var);
        }
        let (bm, bl, bh) = if depth == 0 {
            (Bound::AtMost(0.05), Bound::Within(0.8, 1.25), Bound::Within(0.8, 1.25))
        } else {
            (Bound::Report, Bound::Report, Bound::Report)
        };
        checks.push(Check::new(format!("hidden layer {} sampled max |mean|", depth + 1), worst_mean, bm));
        checks.push(Check::new(format!("hidden layer {} sampled min variance", depth + 1), lo, bl));
        checks.push(Check::new(format!("hidden layer {} sampled max variance", depth + 1), hi, bh));
    }
    Ok(checks)
}

/// Equivalence introduction followed by stripping reproduces the original outputs.
pub fn equivalence_checks(seed: u64) -> Result<Vec<Check>> {
    let base = mnist_mlp(WeightInit::Normal, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 50, 0));
    let batches: Vec<Tensor> = (0..10).map(|_| Tensor::from_fn(vec![32, 1, 28, 28], |_| rng.gen::<f32>())).collect();
    let mut checks = Vec::new();
    for mode in [NormMode::Ap2, NormMode::Wn] {
        let normed = introduce_normalization(&base, mode, InitMode::Equivalence, None, seed)?;
        let back = strip_normalization(&normed, None)?;
        let (mut d_norm, mut d_back) = (0.0f64, 0.0f64);
        for x in &batches {
            let y = base.forward(x, true)?;
            d_norm = d_norm.max(normed.forward(x, true)?.max_abs_diff(&y)?);
            d_back = d_back.max(back.forward(x, true)?.max_abs_diff(&y)?);
        }
        checks.push(Check::new(format!("{mode} introduced vs original, 10 batches"), d_norm, Bound::AtMost(1e-5)));
        checks.push(Check::new(format!("{mode} round trip vs original, 10 batches"), d_back, Bound::AtMost(1e-5)));
    }
    let x = &batches[0];
    let normed = introduce_normalization(&base, NormMode::Bn, InitMode::Equivalence, Some(x), seed)?;
    let back = strip_normalization(&normed, Some(x))?;
    let y = base.forward(x, true)?;
    checks.push(Check::new("bn introduced vs original, conversion batch", normed.forward(x, true)?.max_abs_diff(&y)?, Bound::AtMost(1e-5)));
    checks.push(Check::new("bn round trip vs original, conversion batch", back.forward(x, true)?.max_abs_diff(&y)?, Bound::AtMost(1e-5)));
    Ok(checks)
}

/// The CIFAR CNN without padding, so that spatially constant input
/// statistics stay constant and both models describe the same quantity.
pub fn unpadded_cifar_cnn(seed: u64) -> Result<NetworkSpec> {
    let mut net = cifar_cnn(WeightInit::Normal, seed)?;
    for layer in &mut net.layers {
        if let LayerSpec::Conv { pad, .. } = layer {
            *pad = 0;
        }
    }
    net.layer_shapes()?;
    Ok(net)
}

/// Per-pixel `(mean, variance)` maps of one example, channel-major.
struct Maps {
    c: usize,
    h: usize,
    w: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Propagates per-pixel moment maps through the convolutions, with every
/// channel fully correlated across space and channels independent:
/// `var_out[o,p] = Σ_c (Σ_k W[o,c,k]·sd[c,p+k])²`.
fn spatial_conv(m: &Maps, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Maps> {
    let g = ConvGeometry::new(m.c, m.h, m.w, weight.shape(), stride, pad)?;
    let filters = weight.to_f64();
    let mut mean = vec![0.0; g.out_len()];
    kernels::conv2d_forward(&g, 1, &m.mean, &filters, &bias.to_f64(), &mut mean);
    let one = ConvGeometry::new(1, m.h, m.w, &[g.c_out, 1, g.kh, g.kw], stride, pad)?;
    let taps = g.kh * g.kw;
    let mut var = vec![0.0; g.out_len()];
    let mut part = vec![0.0; g.out_len()];
    let zero = vec![0.0; g.c_out];
    for c in 0..m.c {
        let sd: Vec<f64> = m.var[c * m.h * m.w..(c + 1) * m.h * m.w].iter().map(|v| v.sqrt()).collect();
        let slice: Vec<f64> = (0..g.c_out).flat_map(|o| filters[(o * m.c + c) * taps..(o * m.c + c + 1) * taps].iter().copied()).collect();
        kernels::conv2d_forward(&one, 1, &sd, &slice, &zero, &mut part);
        var.iter_mut().zip(&part).for_each(|(v, p)| *v += p * p);
    }
    Ok(Maps { c: g.c_out, h: g.out_h, w: g.out_w, mean, var })
}

/// Largest relative gap between per-pixel maps and per-channel statistics.
fn map_gap(m: &Maps, stats: &MomentPair) -> f64 {
    let px = m.h * m.w;
    let mut gap = 0.0f64;
    for k in 0..m.mean.len() {
        let c = k / px;
        gap = gap
            .max((m.mean[k] - stats.mean[c]).abs() / stats.mean[c].abs().max(1.0))
            .max((m.var[k] - stats.var[c]).abs() / stats.var[c].abs().max(1.0));
    }
    gap
}

/// Collapsed convolution statistics against explicit per-pixel propagation.
pub fn collapse_checks(seed: u64) -> Result<Vec<Check>> {
    let mut net = unpadded_cifar_cnn(seed)?;
    net.input_stats = MomentPair::new(vec![0.4, -0.3, 0.1], vec![0.8, 1.5, 0.3])?;
    let stats = analytic_stats(&net)?;
    let [c, h, w] = [net.input_shape[0], net.input_shape[1], net.input_shape[2]];
    let mut maps = Maps {
        c,
        h,
        w,
        mean: (0..c * h * w).map(|k| net.input_stats.mean[k / (h * w)]).collect(),
        var: (0..c * h * w).map(|k| net.input_stats.var[k / (h * w)]).collect(),
    };
    let mut gap = 0.0f64;
    let mut compared = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { weight, bias, stride, pad } => maps = spatial_conv(&maps, weight, bias, *stride, *pad)?,
            LayerSpec::Activation(a) => match a.pointwise() {
                Some(f) => {
                    for k in 0..maps.mean.len() {
                        let y = f.moments(MomentScalar { mean: maps.mean[k], var: maps.var[k] });
                        maps.mean[k] = y.mean;
                        maps.var[k] = y.var;
                    }
                }
                None => break,
            },
            LayerSpec::GlobalAvgPool => break,
            other => return Err(Error::invalid("collapse_checks", format!("unexpected {} layer", other.kind()))),
        }
        gap = gap.max(map_gap(&maps, &stats.layers[i]));
        compared += 1;
    }
    Ok(vec![Check::new(format!("collapsed vs per-pixel statistics over {compared} layers, max relative gap"), gap, Bound::AtMost(1e-6))])
}

/// BN's batch-mode and eval-mode losses part ways after a little training
/// while AP2's two modes agree bit for bit.
pub fn train_eval_checks(seed: u64) -> Result<Vec<Check>> {
    let data = synthetic_blobs(1024, 4, 8, 4.0, seed)?;
    let base = mlp(vec![8], &[16, 16], 4, Activation::Relu, WeightInit::Normal, seed)?;
    let mut checks = Vec::new();
    for (norm, init) in [(NormMode::Bn, InitProtocol::Bn), (NormMode::Ap2, InitProtocol::Ap2)] {
        let cfg = TrainConfig { norm, init, seed, epochs: 1, lr0: 1e-3, ..Default::default() };
        let net = train(&prepare(&base, &data, &cfg)?, &data, None, &cfg)?.net;
        let (x, y) = data.batch(&(0..128).collect::<Vec<_>>())?;
        let batch_mode = net.loss(&x, &y, true)?;
        let eval_mode = net.loss(&x, &y, false)?;
        let gap = (batch_mode - eval_mode).abs();
        if norm == NormMode::Bn {
            checks.push(Check::new("bn |batch-mode loss - eval-mode loss| after 1 epoch", gap, Bound::AtLeast(1e-6)));
        } else {
            let out_gap = net.forward(&x, true)?.max_abs_diff(&net.forward(&x, false)?)?;
            checks.push(Check::new("ap2 |batch-mode loss - eval-mode loss| after 1 epoch", gap, Bound::AtMost(0.0)));
            checks.push(Check::new("ap2 batch-mode vs eval-mode outputs", out_gap, Bound::AtMost(0.0)));
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{phi_cdf, phi_pdf};

    fn quick() -> VerifyOptions {
        VerifyOptions { samples: 1_000_000, ..Default::default() }
    }

    /// ReLU with the sign of the φ term flipped.
    fn broken_relu(x: MomentScalar) -> MomentScalar {
        let s = x.std();
        let a = x.mean / s;
        let (cdf, pdf) = (phi_cdf(a), phi_pdf(a));
        let t = a * cdf - pdf;
        MomentScalar { mean: x.mean * cdf - s * pdf, var: x.var * ((a * a + 1.0) * cdf - a * pdf - t * t).max(0.0) }
    }

    #[test]
    fn moment_suite_passes() {
        let r = run_suite(Suite::Moments, &quick()).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.checks.len() > 10);
    }

    #[test]
    fn moment_suite_catches_a_broken_relu() {
        let opts = VerifyOptions { relu: broken_relu, ..quick() };
        let r = run_suite(Suite::Moments, &opts).unwrap();
        assert!(!r.passed());
        assert!(r.checks.iter().filter(|c| !c.passed()).all(|c| c.name.starts_with("relu")));
    }

    #[test]
    fn gradient_check_on_a_small_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = mlp(vec![5], &[4], 3, Activation::Sigmoid, WeightInit::Normal, 2).unwrap();
        let x = gaussian_batch(vec![6, 5], &mut rng);
        let y = vec![0, 1, 2, 0, 1, 2];
        for mode in NormMode::ALL {
            let net = normalized(&base, mode, &x, 3).unwrap();
            for detach in [false, true] {
                let e = gradient_error(&net, &x, &y, detach, 20, 4).unwrap();
                assert!(e < 1e-4, "{mode} {detach}: {e}");
            }
        }
    }

    #[test]
    fn fixed_statistics_reproduce_the_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = mlp(vec![5], &[4], 3, Activation::Sigmoid, WeightInit::Normal, 2).unwrap();
        let x = gaussian_batch(vec![6, 5], &mut rng);
        let y = vec![0, 1, 2, 0, 1, 2];
        let net = normalized(&base, NormMode::Bn, &x, 3).unwrap();
        let opts = ForwardOptions::default();
        let (loss, full, records) = net.loss_and_grads(&x, &y, opts).unwrap();
        let params = net.param_values();
        assert_eq!(net.loss_with_stats(&params, &x, &y, true, &records).unwrap(), loss);
        let (_, detached, _) = net.loss_and_grads(&x, &y, ForwardOptions { detach_stats: true, ..opts }).unwrap();
        assert!(max_abs_diff(&full[0], &detached[0]) > 1e-6);
        assert!(net.loss_with_stats(&params, &x, &y, true, &records[..1]).is_ok());
        let mut short = records.clone();
        short[0].mu.pop();
        assert!(net.loss_with_stats(&params, &x, &y, true, &short).is_err());
    }

    #[test]
    fn invariance_suite_passes() {
        let r = run_suite(Suite::Invariances, &quick()).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn report_formatting() {
        let c = Check::new("x", 0.5, Bound::AtMost(1.0));
        assert!(c.passed() && c.to_string().starts_with("ok"));
        assert!(!Check::new("x", f64::NAN, Bound::Report).passed());
        assert!(Check::new("x", 3.0, Bound::Report).to_string().starts_with("info"));
        assert!(!Check::new("x", 2.0, Bound::Within(0.0, 1.0)).passed());
        assert_eq!("gradients".parse::<Suite>().unwrap(), Suite::Gradients);
        assert!("all".parse::<Suite>().is_err());
    }
}
