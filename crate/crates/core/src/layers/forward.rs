use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, LayerSpec, NetworkSpec, NormMode, ParamRole};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Batch statistics for BN and sampled dropout masks.
    pub training: bool,
    /// Treat every normalization `(μ, σ)` as a constant in the backward pass.
    pub detach_stats: bool,
    /// Seeds dropout masks.
    pub seed: u64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { training: true, detach_stats: false, seed: 0 }
    }
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { training: false, ..Default::default() }
    }
}

/// The `(μ, σ)` a normalization layer used in one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRecord {
    pub layer: usize,
    pub mode: NormMode,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// BN in training mode: biased batch variance and the number of values behind it.
    pub batch_var: Option<(Vec<f64>, usize)>,
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub tape: Tape,
    pub input: Var,
    pub output: Var,
    /// Aligned with `NetworkSpec::param_refs`.
    pub params: Vec<Var>,
    /// Data output of every layer.
    pub layer_outputs: Vec<Var>,
    pub norm_records: Vec<NormRecord>,
}

impl Forward {
    pub fn output_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(self.tape.shape(self.output).to_vec(), self.tape.value(self.output))
    }

    /// Appends the mean negative log-likelihood; the network must end in log_softmax.
    pub fn nll(&mut self, labels: &[usize]) -> Result<Var> {
        self.tape.nll(self.output, labels)
    }
}

fn check_finite(tape: &Tape, v: Var, index: usize, kind: &str) -> Result<()> {
    match tape.value(v).iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite { context: format!("output of layer {index} ({kind})"), index: i, value: tape.value(v)[i] }),
    }
}

/// Runs `net` on `batch` with the given parameter values, recording a tape.
///
/// The moment pair of every unit is propagated alongside the data so that AP2
/// layers can read (and differentiate) their statistics.
pub fn forward_tape(net: &NetworkSpec, params: &[Vec<f64>], batch: &Tensor, opts: ForwardOptions) -> Result<Forward> {
    forward_tape_with_stats(net, params, batch, opts, &[])
}

/// Like [`forward_tape`], but every normalization layer listed in `fixed`
/// uses the recorded `(μ, σ)` as constants instead of computing them.
pub fn forward_tape_with_stats(
    net: &NetworkSpec,
    params: &[Vec<f64>],
    batch: &Tensor,
    opts: ForwardOptions,
    fixed: &[NormRecord],
) -> Result<Forward> {
    let refs = net.param_refs();
    if params.len() != refs.len() {
        return Err(Error::shape("forward", format!("{} parameter tensors for {} slots", params.len(), refs.len())));
    }
    if batch.rank() != net.input_shape.len() + 1 || batch.shape()[1..] != net.input_shape[..] {
        return Err(Error::shape("forward", format!("batch {:?} for input shape {:?}", batch.shape(), net.input_shape)));
    }
    let mut tape = Tape::new();
    let mut param_vars = Vec::with_capacity(refs.len());
    for (r, v) in refs.iter().zip(params) {
        let shape = net.param(*r).expect("listed parameter exists").shape().to_vec();
        param_vars.push(tape.leaf(shape, v.clone())?);
    }
    let pvar = |layer: usize, role: ParamRole| {
        refs.iter().position(|r| r.layer == layer && r.role == role).map(|i| param_vars[i]).expect("parameter slot exists")
    };

    let input = tape.leaf(batch.shape().to_vec(), batch.to_f64())?;
    let mut x = input;
    let mut stats = Some(tape.moment_leaf(&net.input_stats.mean, &net.input_stats.var)?);
    let mut last_param: Option<usize> = None;
    let mut layer_outputs = Vec::with_capacity(net.layers.len());
    let mut norm_records = Vec::new();

    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Linear { .. } | LayerSpec::Conv { .. } => {
                let (w, b) = (pvar(i, ParamRole::Weight), pvar(i, ParamRole::Bias));
                if let LayerSpec::Conv { stride, pad, .. } = layer {
                    x = tape.conv2d(x, w, b, *stride, *pad)?;
                    if let Some(p) = stats {
                        let collapsed = tape.spatial_sum(w)?;
                        stats = Some(tape.moment_linear(p, collapsed, b)?);
                    }
                } else {
                    x = tape.linear(x, w, b)?;
                    if let Some(p) = stats {
                        stats = Some(tape.moment_linear(p, w, b)?);
                    }
                }
                last_param = Some(i);
            }
            LayerSpec::Activation(Activation::LogSoftmax) => {
                x = tape.log_softmax(x)?;
                stats = None;
            }
            LayerSpec::Activation(a) => {
                let f = a.pointwise().expect("pointwise activation");
                x = tape.pointwise(x, f)?;
                if let Some(p) = stats {
                    stats = Some(tape.moment_pointwise(p, f)?);
                }
            }
            LayerSpec::Dropout { keep_prob, scale } => {
                let (p, c) = (f64::from(*keep_prob), f64::from(*scale));
                let len = tape.value(x).len();
                let factors = if opts.training {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, DROPOUT_STREAM, i as u64));
                    (0..len).map(|_| if rng.gen::<f64>() < p { c } else { 0.0 }).collect()
                } else {
                    vec![p * c; len]
                };
                x = tape.mul_const(x, factors)?;
                if let Some(pair) = stats {
                    stats = Some(tape.moment_dropout(pair, p, c)?);
                }
            }
            LayerSpec::Flatten => {
                let shape = tape.shape(x).to_vec();
                let inner: usize = shape[1..].iter().product();
                x = tape.reshape(x, vec![shape[0], inner])?;
                if let Some(p) = stats {
                    let units = tape.value(p).len() / 2;
                    stats = Some(tape.moment_repeat(p, inner / units)?);
                }
            }
            LayerSpec::GlobalAvgPool => {
                x = tape.global_avg_pool(x)?;
            }
            LayerSpec::Norm(state) => {
                let c = state.channels();
                let (s, b) = (pvar(i, ParamRole::Scale), pvar(i, ParamRole::Shift));
                let mut batch_var = None;
                let (mut mu, mut sigma) = match state.mode {
                    _ if fixed.iter().any(|r| r.layer == i) => {
                        let rec = fixed.iter().find(|r| r.layer == i).expect("checked");
                        if rec.mu.len() != c || rec.sigma.len() != c {
                            return Err(Error::shape("forward", format!("fixed statistics for layer {i} have the wrong length")));
                        }
                        (tape.leaf(vec![c], rec.mu.clone())?, tape.leaf(vec![c], rec.sigma.clone())?)
                    }
                    NormMode::None => (tape.leaf(vec![c], state.mu.to_f64())?, tape.leaf(vec![c], state.sigma.to_f64())?),
                    NormMode::Ap2 => {
                        let p = stats.ok_or_else(|| Error::UnsupportedLayer {
                            index: i,
                            kind: "ap2 normalization after log_softmax".into(),
                            op: "forward",
                        })?;
                        let mean = tape.pair_mean(p)?;
                        let var = tape.pair_var(p)?;
                        (mean, tape.sqrt_eps(var, state.eps)?)
                    }
                    NormMode::Bn if opts.training => {
                        let mean = tape.channel_mean(x)?;
                        let var = tape.channel_var(x)?;
                        let count = tape.value(x).len() / c;
                        batch_var = Some((tape.value(var).to_vec(), count));
                        (mean, tape.sqrt_eps(var, state.eps)?)
                    }
                    NormMode::Bn => {
                        if state.running_updates == 0 {
                            return Err(Error::MissingRunningStats { index: i });
                        }
                        let sd: Vec<f64> = state.running_var.data().iter().map(|&v| (f64::from(v) + state.eps).sqrt()).collect();
                        (tape.leaf(vec![c], state.running_mean.to_f64())?, tape.leaf(vec![c], sd)?)
                    }
                    NormMode::Wn => {
                        let p = last_param.ok_or_else(|| Error::Layer {
                            index: i,
                            detail: "weight normalization needs a preceding linear or conv layer".into(),
                        })?;
                        let sq = tape.row_sq_norm(pvar(p, ParamRole::Weight))?;
                        (pvar(p, ParamRole::Bias), tape.sqrt_eps(sq, state.eps)?)
                    }
                };
                if opts.detach_stats {
                    mu = tape.detach(mu);
                    sigma = tape.detach(sigma);
                }
                norm_records.push(NormRecord {
                    layer: i,
                    mode: state.mode,
                    mu: tape.value(mu).to_vec(),
                    sigma: tape.value(sigma).to_vec(),
                    batch_var,
                });
                x = tape.channel_normalize(x, mu, sigma, s, b)?;
                stats = match (state.mode, stats) {
                    (NormMode::Ap2 | NormMode::Bn, _) => Some(tape.moment_from_affine(s, b)?),
                    (_, Some(p)) => Some(tape.moment_affine(p, mu, sigma, s, b)?),
                    (_, None) => None,
                };
            }
        }
        check_finite(&tape, x, i, layer.kind())?;
        layer_outputs.push(x);
    }
    Ok(Forward { tape, input, output: x, params: param_vars, layer_outputs, norm_records })
}

impl NetworkSpec {
    /// Output of the network on `batch` (no state is updated).
    pub fn forward(&self, batch: &Tensor, training: bool) -> Result<Tensor> {
        let opts = ForwardOptions { training, ..Default::default() };
        forward_tape(self, &self.param_values(), batch, opts)?.output_tensor()
    }

    /// Mean NLL of `labels` and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize], opts: ForwardOptions) -> Result<(f64, Vec<Vec<f64>>, Vec<NormRecord>)> {
        self.loss_and_grads_at(&self.param_values(), batch, labels, opts)
    }

    /// Like [`loss_and_grads`](Self::loss_and_grads) at explicit parameter values.
    pub fn loss_and_grads_at(
        &self,
        params: &[Vec<f64>],
        batch: &Tensor,
        labels: &[usize],
        opts: ForwardOptions,
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<NormRecord>)> {
        if !matches!(self.layers.last(), Some(LayerSpec::Activation(Activation::LogSoftmax))) {
            return Err(Error::invalid("loss", "the network must end in log_softmax"));
        }
        let mut fwd = forward_tape(self, params, batch, opts)?;
        let loss = fwd.nll(labels)?;
        let grads = fwd.tape.backward(loss)?;
        let value = fwd.tape.value(loss)[0];
        let g = fwd.params.iter().map(|&v| grads.wrt(v)).collect();
        Ok((value, g, fwd.norm_records))
    }

    /// Mean NLL of `labels` without a backward pass.
    pub fn loss(&self, batch: &Tensor, labels: &[usize], training: bool) -> Result<f64> {
        self.loss_at(&self.param_values(), batch, labels, training)
    }

    pub fn loss_at(&self, params: &[Vec<f64>], batch: &Tensor, labels: &[usize], training: bool) -> Result<f64> {
        self.loss_with_stats(params, batch, labels, training, &[])
    }

    /// Mean NLL with the statistics of the listed normalization layers held fixed.
    pub fn loss_with_stats(
        &self,
        params: &[Vec<f64>],
        batch: &Tensor,
        labels: &[usize],
        training: bool,
        fixed: &[NormRecord],
    ) -> Result<f64> {
        let opts = ForwardOptions { training, ..Default::default() };
        let mut fwd = forward_tape_with_stats(self, params, batch, opts, fixed)?;
        let loss = fwd.nll(labels)?;
        Ok(fwd.tape.value(loss)[0])
    }

    /// Stores the `(μ, σ)` of a pass and, for BN in training, advances the
    /// running statistics (`new = (1−momentum)·old + momentum·batch`, with the
    /// unbiased batch variance).
    pub fn apply_norm_records(&mut self, records: &[NormRecord]) -> Result<()> {
        for rec in records {
            let state = self
                .norm_state_mut(rec.layer)
                .ok_or_else(|| Error::invalid("apply_norm_records", format!("layer {} is not a norm layer", rec.layer)))?;
            let c = state.channels();
            state.mu = Tensor::from_f64(vec![c], &rec.mu)?;
            state.sigma = Tensor::from_f64(vec![c], &rec.sigma)?;
            if let Some((var, count)) = &rec.batch_var {
                let m = state.momentum;
                let unbias = if *count > 1 { *count as f64 / (*count as f64 - 1.0) } else { 1.0 };
                let mean: Vec<f64> =
                    state.running_mean.data().iter().zip(&rec.mu).map(|(&r, &b)| (1.0 - m) * f64::from(r) + m * b).collect();
                let rvar: Vec<f64> =
                    state.running_var.data().iter().zip(var).map(|(&r, &v)| (1.0 - m) * f64::from(r) + m * v * unbias).collect();
                state.running_mean = Tensor::from_f64(vec![c], &mean)?;
                state.running_var = Tensor::from_f64(vec![c], &rvar)?;
                state.running_updates += 1;
            }
        }
        Ok(())
    }
}
