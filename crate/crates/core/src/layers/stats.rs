use super::forward::{forward_tape, ForwardOptions};
use super::{Activation, LayerSpec, NetworkSpec, NormMode, NormState};
use crate::error::{Error, Result};
use crate::moments::{dropout_moments_scaled, linear_moments, linear_moments_raw, MomentPair};
use crate::tensor::{kernels, Tensor};

/// Per-unit statistics of every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticStats {
    pub input: MomentPair,
    /// `layers[i]` describes the output of layer `i`. A trailing log_softmax
    /// ends the pass, so it has no entry.
    pub layers: Vec<MomentPair>,
}

impl AnalyticStats {
    /// Statistics flowing into layer `index`.
    pub fn entering(&self, index: usize) -> Option<&MomentPair> {
        match index {
            0 => Some(&self.input),
            i => self.layers.get(i - 1),
        }
    }
}

/// `(μ, σ)` of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormEstimate {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn sqrt_eps(var: &[f64], eps: f64) -> Vec<f64> {
    var.iter().map(|v| (v + eps).sqrt()).collect()
}

/// WN: `σ = sqrt(‖w_row‖² + eps)`, `μ` = the layer bias (the mean of
/// `wᵀz + a` for zero-mean `z`).
fn weight_norm_estimate(weight: &Tensor, bias: &Tensor, eps: f64) -> NormEstimate {
    let rows = bias.len();
    let w = weight.to_f64();
    let row = w.len() / rows;
    let sq: Vec<f64> = w.chunks(row).map(|r| r.iter().map(|v| v * v).sum()).collect();
    NormEstimate { mu: bias.to_f64(), sigma: sqrt_eps(&sq, eps) }
}

fn affine(stats: &MomentPair, est: &NormEstimate, state: &NormState) -> MomentPair {
    let (s, b) = (state.scale.to_f64(), state.shift.to_f64());
    let mut out = stats.clone();
    for i in 0..stats.len() {
        let k = s[i] / est.sigma[i];
        out.mean[i] = (stats.mean[i] - est.mu[i]) * k + b[i];
        out.var[i] = stats.var[i] * k * k;
    }
    out
}

/// Propagates the input statistics through the whole network.
///
/// Conv layers use the spatially constant model: the filters are summed over
/// their spatial extent and applied as a linear map on channels. After an AP2
/// or BN layer the statistics are reset to `(b, s²)`; WN and fixed layers
/// apply their affine map to the incoming statistics. BN layers therefore
/// need no batch here.
pub fn analytic_stats(net: &NetworkSpec) -> Result<AnalyticStats> {
    let shapes = net.layer_shapes()?;
    let mut cur = net.input_stats.clone();
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        cur = match layer {
            LayerSpec::Linear { weight, bias } => linear_moments(&cur, weight, bias)?,
            LayerSpec::Conv { weight, bias, .. } => {
                let &[o, c, kh, kw] = weight.shape() else { unreachable!("validated conv weight") };
                let collapsed = kernels::spatial_sum(&weight.to_f64(), o * c, kh * kw);
                let (mean, var) = linear_moments_raw(&cur.mean, &cur.var, &collapsed, &bias.to_f64(), o);
                MomentPair { mean, var }
            }
            LayerSpec::Activation(Activation::LogSoftmax) => {
                if i + 1 == net.layers.len() {
                    break;
                }
                return Err(Error::UnsupportedLayer { index: i, kind: layer.kind().into(), op: "analytic_stats (only as the last layer)" });
            }
            LayerSpec::Activation(a) => {
                let f = a.pointwise().expect("pointwise activation");
                cur.map(|x| f.moments(x))
            }
            LayerSpec::Dropout { keep_prob, scale } => {
                let (p, c) = (f64::from(*keep_prob), f64::from(*scale));
                let mut out = cur.clone();
                for u in 0..cur.len() {
                    let y = dropout_moments_scaled(cur.get(u), p, c)?;
                    out.mean[u] = y.mean;
                    out.var[u] = y.var;
                }
                out
            }
            LayerSpec::Flatten => {
                let shape = if i == 0 { &net.input_shape } else { &shapes[i - 1] };
                let inner: usize = shape[1..].iter().product();
                let rep = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat(x).take(inner)).collect::<Vec<_>>();
                MomentPair { mean: rep(&cur.mean), var: rep(&cur.var) }
            }
            LayerSpec::GlobalAvgPool => cur,
            LayerSpec::Norm(state) => match state.mode {
                NormMode::Ap2 | NormMode::Bn => {
                    MomentPair { mean: state.shift.to_f64(), var: state.scale.to_f64().iter().map(|s| s * s).collect() }
                }
                NormMode::Wn | NormMode::None => {
                    let est = estimate_from_state(net, i, state, Some(&cur))?;
                    affine(&cur, &est, state)
                }
            },
        };
        layers.push(cur.clone());
    }
    Ok(AnalyticStats { input: net.input_stats.clone(), layers })
}

/// Estimates that need no batch: AP2 from the stats entering the layer, WN
/// from the preceding weights, `None` from the stored values.
fn estimate_from_state(net: &NetworkSpec, index: usize, state: &NormState, entering: Option<&MomentPair>) -> Result<NormEstimate> {
    match state.mode {
        NormMode::None => Ok(NormEstimate { mu: state.mu.to_f64(), sigma: state.sigma.to_f64() }),
        NormMode::Ap2 => {
            let stats = entering.ok_or_else(|| Error::invalid("estimate_norm_stats", "missing analytic statistics"))?;
            Ok(NormEstimate { mu: stats.mean.clone(), sigma: sqrt_eps(&stats.var, state.eps) })
        }
        NormMode::Wn => {
            let p = net
                .preceding_param_layer(index)
                .ok_or_else(|| Error::Layer { index, detail: "weight normalization needs a preceding linear or conv layer".into() })?;
            let (w, b) = net.layers[p].weight_bias().expect("parameterized layer");
            Ok(weight_norm_estimate(w, b, state.eps))
        }
        NormMode::Bn => {
            if state.running_updates == 0 {
                return Err(Error::MissingRunningStats { index });
            }
            Ok(NormEstimate { mu: state.running_mean.to_f64(), sigma: sqrt_eps(&state.running_var.to_f64(), state.eps) })
        }
    }
}

impl NetworkSpec {
    /// `(μ, σ)` the normalization layer at `index` would use.
    ///
    /// BN takes the statistics of `batch` when one is given (training mode)
    /// and its running statistics otherwise (eval mode).
    pub fn estimate_norm_stats(&self, index: usize, batch: Option<&Tensor>) -> Result<NormEstimate> {
        let state =
            self.norm_state(index).ok_or_else(|| Error::invalid("estimate_norm_stats", format!("layer {index} is not a norm layer")))?;
        match (state.mode, batch) {
            (NormMode::Bn, Some(batch)) => {
                let fwd = forward_tape(self, &self.param_values(), batch, ForwardOptions::default())?;
                let rec = fwd.norm_records.into_iter().find(|r| r.layer == index).expect("every norm layer leaves a record");
                Ok(NormEstimate { mu: rec.mu, sigma: rec.sigma })
            }
            (NormMode::Ap2, _) => {
                let stats = analytic_stats(self)?;
                estimate_from_state(self, index, state, stats.entering(index))
            }
            _ => estimate_from_state(self, index, state, None),
        }
    }

    /// Estimates for every normalization layer, keyed by layer index.
    pub fn estimate_all_norm_stats(&self, batch: Option<&Tensor>) -> Result<Vec<(usize, NormEstimate)>> {
        let indices = self.norm_indices();
        let needs_batch = indices.iter().any(|&i| self.norm_state(i).map(|s| s.mode) == Some(NormMode::Bn));
        let records = match (needs_batch, batch) {
            (true, Some(b)) => forward_tape(self, &self.param_values(), b, ForwardOptions::default())?.norm_records,
            _ => Vec::new(),
        };
        let stats = if indices.iter().any(|&i| self.norm_state(i).map(|s| s.mode) == Some(NormMode::Ap2)) {
            Some(analytic_stats(self)?)
        } else {
            None
        };
        indices
            .into_iter()
            .map(|i| {
                let state = self.norm_state(i).expect("norm layer");
                let est = match state.mode {
                    NormMode::Bn if batch.is_some() => {
                        let rec = records.iter().find(|r| r.layer == i).expect("every norm layer leaves a record");
                        NormEstimate { mu: rec.mu.clone(), sigma: rec.sigma.clone() }
                    }
                    _ => estimate_from_state(self, i, state, stats.as_ref().and_then(|s| s.entering(i)))?,
                };
                Ok((i, est))
            })
            .collect()
    }

    /// Stores fresh estimates in every normalization layer's `mu`/`sigma`.
    pub fn refresh_norm_estimates(&mut self, batch: Option<&Tensor>) -> Result<()> {
        for (i, est) in self.estimate_all_norm_stats(batch)? {
            let state = self.norm_state_mut(i).expect("norm layer");
            let c = state.channels();
            state.mu = Tensor::from_f64(vec![c], &est.mu)?;
            state.sigma = Tensor::from_f64(vec![c], &est.sigma)?;
        }
        Ok(())
    }
}
