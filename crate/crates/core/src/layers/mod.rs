//! Network description, forward pass, normalization layers and the analytic
//! statistics pass.

mod convert;
mod forward;
mod io;
mod presets;
mod stats;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::moments::{MomentPair, Pointwise};
use crate::tensor::{ConvGeometry, Tensor};

pub use convert::{introduce_normalization, strip_normalization, InitMode};
pub use forward::{forward_tape, forward_tape_with_stats, Forward, ForwardOptions, NormRecord};
pub use io::{load_model, save_model};
pub use presets::{cifar_cnn, mlp, mnist_mlp, WeightInit, CIFAR_CHANNELS, CIFAR_KERNELS, CIFAR_SLOPE, CIFAR_STRIDES};
pub use stats::{analytic_stats, AnalyticStats, NormEstimate};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// `max(0,x) + slope·min(0,x)`.
    LeakyRelu(f32),
    Sigmoid,
    LogSoftmax,
}

impl Activation {
    /// The coordinate-wise function, if this is one.
    pub fn pointwise(self) -> Option<Pointwise> {
        match self {
            Activation::Relu => Some(Pointwise::Relu),
            Activation::LeakyRelu(s) => Some(Pointwise::LeakyRelu(f64::from(s))),
            Activation::Sigmoid => Some(Pointwise::Sigmoid),
            Activation::LogSoftmax => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMode {
    /// Fixed `(μ, σ)`; only `s` and `b` act.
    None,
    /// Statistics from the analytic moment pass.
    Ap2,
    /// Statistics of the current batch (running averages in eval mode).
    Bn,
    /// `σ = ‖w_row‖`, `μ` the preceding bias.
    Wn,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [NormMode::None, NormMode::Ap2, NormMode::Bn, NormMode::Wn];

    pub fn name(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::Ap2 => "ap2",
            NormMode::Bn => "bn",
            NormMode::Wn => "wn",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("norm mode", format!("unknown mode {s:?} (none|ap2|bn|wn)")))
    }
}

/// Parameters and estimator state of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mode: NormMode,
    /// `s`, per channel.
    pub scale: Tensor,
    /// `b`, per channel.
    pub shift: Tensor,
    /// Last estimate of `μ` (the fixed value in mode `None`).
    pub mu: Tensor,
    /// Last estimate of `σ` (the fixed value in mode `None`).
    pub sigma: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub running_updates: u64,
    pub eps: f64,
    pub momentum: f64,
}

impl NormState {
    /// `s = 1`, `b = 0`, `μ = 0`, `σ = 1`, no running statistics yet.
    pub fn new(mode: NormMode, channels: usize) -> Self {
        NormState {
            mode,
            scale: Tensor::full(vec![channels], 1.0),
            shift: Tensor::zeros(vec![channels]),
            mu: Tensor::zeros(vec![channels]),
            sigma: Tensor::full(vec![channels], 1.0),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            running_updates: 0,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `weight: [out, in]`, `bias: [out]`.
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    /// `weight: [out, in, kh, kw]`, `bias: [out]`, zero padding.
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    Activation(Activation),
    Norm(NormState),
    /// Multiplies by `scale·Bernoulli(keep_prob)` in training, by `scale·keep_prob` otherwise.
    Dropout {
        keep_prob: f32,
        scale: f32,
    },
    Flatten,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Activation(Activation::Relu) => "relu",
            LayerSpec::Activation(Activation::LeakyRelu(_)) => "leaky_relu",
            LayerSpec::Activation(Activation::Sigmoid) => "sigmoid",
            LayerSpec::Activation(Activation::LogSoftmax) => "log_softmax",
            LayerSpec::Norm(_) => "norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv { .. })
    }

    /// Weight and bias of a linear or conv layer.
    pub fn weight_bias(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            LayerSpec::Linear { weight, bias } | LayerSpec::Conv { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn linear(weight: Tensor, bias: Tensor) -> Self {
        LayerSpec::Linear { weight, bias }
    }

    pub fn norm(mode: NormMode, channels: usize) -> Self {
        LayerSpec::Norm(NormState::new(mode, channels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Scale => "scale",
            ParamRole::Shift => "shift",
        }
    }
}

/// A trainable tensor, addressed by layer index and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub layer: usize,
    pub role: ParamRole,
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}_{}", self.layer, self.role.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Shape of one example, e.g. `[1, 28, 28]` or `[dim]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Per input channel (per feature for 1-d inputs).
    pub input_stats: MomentPair,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, input_stats: MomentPair) -> Result<Self> {
        let net = NetworkSpec { input_shape, layers, input_stats };
        net.layer_shapes()?;
        Ok(net)
    }

    /// Output shape of every layer (one example); fails if the stack does not compose.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |index: usize, detail: String| Error::Layer { index, detail };
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(bad(0, format!("invalid input shape {:?}", self.input_shape)));
        }
        if self.input_stats.len() != self.input_shape[0] {
            return Err(bad(0, format!("{} input statistics for {} input channels", self.input_stats.len(), self.input_shape[0])));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut norm_since_param = false;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Linear { weight, bias } => {
                    let &[o, n_in] = weight.shape() else {
                        return Err(bad(i, format!("linear weight must be 2-d, got {:?}", weight.shape())));
                    };
                    if shape != [n_in] || bias.shape() != [o] {
                        return Err(bad(
                            i,
                            format!("linear {:?} with bias {:?} cannot take input {shape:?}", weight.shape(), bias.shape()),
                        ));
                    }
                    norm_since_param = false;
                    vec![o]
                }
                LayerSpec::Conv { weight, bias, stride, pad } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(i, format!("conv needs a [C, H, W] input, got {shape:?}")));
                    };
                    let g = ConvGeometry::new(c, h, w, weight.shape(), *stride, *pad).map_err(|e| bad(i, e.to_string()))?;
                    if bias.shape() != [g.c_out] {
                        return Err(bad(i, format!("bias {:?} for {} filters", bias.shape(), g.c_out)));
                    }
                    norm_since_param = false;
                    vec![g.c_out, g.out_h, g.out_w]
                }
                LayerSpec::Norm(state) => {
                    if norm_since_param {
                        return Err(bad(i, "two normalization layers without a parameterized layer between".into()));
                    }
                    norm_since_param = true;
                    let n = state.channels();
                    for t in [&state.shift, &state.mu, &state.sigma, &state.running_mean, &state.running_var] {
                        if t.shape() != [n] {
                            return Err(bad(i, format!("normalization tensors of {:?} for {n} channels", t.shape())));
                        }
                    }
                    if shape[0] != n {
                        return Err(bad(i, format!("{n}-channel normalization on input {shape:?}")));
                    }
                    if state.sigma.data().iter().any(|&s| !(s > 0.0)) {
                        return Err(bad(i, "sigma must be positive".into()));
                    }
                    if !(state.eps >= 0.0) || !(0.0..=1.0).contains(&state.momentum) {
                        return Err(bad(i, format!("eps {} / momentum {} out of range", state.eps, state.momentum)));
                    }
                    shape
                }
                LayerSpec::Activation(Activation::LogSoftmax) => {
                    if shape.len() != 1 {
                        return Err(bad(i, format!("log_softmax needs a flat input, got {shape:?}")));
                    }
                    shape
                }
                LayerSpec::Activation(Activation::LeakyRelu(s)) if !(0.0..=1.0).contains(s) => {
                    return Err(bad(i, format!("leaky slope {s} outside [0, 1]")));
                }
                LayerSpec::Activation(_) => shape,
                LayerSpec::Dropout { keep_prob, scale } => {
                    if !(*keep_prob > 0.0 && *keep_prob <= 1.0) || !scale.is_finite() {
                        return Err(bad(i, format!("dropout keep {keep_prob}, scale {scale}")));
                    }
                    shape
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad(i, format!("global average pool needs [C, H, W], got {shape:?}")));
                    }
                    vec![shape[0]]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn has_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Norm(_)))
    }

    pub fn norm_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| matches!(self.layers[i], LayerSpec::Norm(_))).collect()
    }

    pub fn norm_state(&self, index: usize) -> Option<&NormState> {
        match self.layers.get(index) {
            Some(LayerSpec::Norm(s)) => Some(s),
            _ => None,
        }
    }

    pub fn norm_state_mut(&mut self, index: usize) -> Option<&mut NormState> {
        match self.layers.get_mut(index) {
            Some(LayerSpec::Norm(s)) => Some(s),
            _ => None,
        }
    }

    /// Every trainable tensor in layer order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            let roles: &[ParamRole] = match l {
                LayerSpec::Linear { .. } | LayerSpec::Conv { .. } => &[ParamRole::Weight, ParamRole::Bias],
                LayerSpec::Norm(_) => &[ParamRole::Scale, ParamRole::Shift],
                _ => &[],
            };
            refs.extend(roles.iter().map(|&role| ParamRef { layer, role }));
        }
        refs
    }

    pub fn param(&self, r: ParamRef) -> Option<&Tensor> {
        match (self.layers.get(r.layer)?, r.role) {
            (LayerSpec::Linear { weight, .. } | LayerSpec::Conv { weight, .. }, ParamRole::Weight) => Some(weight),
            (LayerSpec::Linear { bias, .. } | LayerSpec::Conv { bias, .. }, ParamRole::Bias) => Some(bias),
            (LayerSpec::Norm(s), ParamRole::Scale) => Some(&s.scale),
            (LayerSpec::Norm(s), ParamRole::Shift) => Some(&s.shift),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> Option<&mut Tensor> {
        match (self.layers.get_mut(r.layer)?, r.role) {
            (LayerSpec::Linear { weight, .. } | LayerSpec::Conv { weight, .. }, ParamRole::Weight) => Some(weight),
            (LayerSpec::Linear { bias, .. } | LayerSpec::Conv { bias, .. }, ParamRole::Bias) => Some(bias),
            (LayerSpec::Norm(s), ParamRole::Scale) => Some(&mut s.scale),
            (LayerSpec::Norm(s), ParamRole::Shift) => Some(&mut s.shift),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_refs().iter().filter_map(|&r| self.param(r)).map(Tensor::len).sum()
    }

    /// Parameters as 64-bit vectors, aligned with [`param_refs`](Self::param_refs).
    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.param_refs().iter().filter_map(|&r| self.param(r)).map(Tensor::to_f64).collect()
    }

    pub fn set_param_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let refs = self.param_refs();
        if refs.len() != values.len() {
            return Err(Error::shape("set_param_values", format!("{} tensors for {} parameters", values.len(), refs.len())));
        }
        for (r, v) in refs.into_iter().zip(values) {
            let t = self.param_mut(r).expect("listed parameter exists");
            if t.len() != v.len() {
                return Err(Error::shape("set_param_values", format!("{r}: {} values for {}", v.len(), t.len())));
            }
            *t = Tensor::from_f64(t.shape().to_vec(), v)?;
        }
        Ok(())
    }

    /// Index of the linear/conv layer closest before `index`.
    pub fn preceding_param_layer(&self, index: usize) -> Option<usize> {
        (0..index).rev().find(|&i| self.layers[i].is_parameterized())
    }
}

#[cfg(test)]
mod tests;
