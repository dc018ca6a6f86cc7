use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, NetworkSpec, NormMode, NormState};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const SCALE_STREAM: u64 = 0x7363_616c;

/// How the parameters of newly inserted normalization layers are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `s = σ`, `b = μ`: the network computes the same function.
    Equivalence,
    /// `s = 1`, `b = 0`.
    Projecting,
    /// `s ~ U[0, 1)`, `b = 0`.
    ProjectingRandomScale,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Equivalence => "equivalence",
            InitMode::Projecting => "projecting",
            InitMode::ProjectingRandomScale => "bn-style",
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitMode::Equivalence, InitMode::Projecting, InitMode::ProjectingRandomScale]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("init mode", format!("unknown init {s:?} (equivalence|projecting|bn-style)")))
    }
}

fn out_channels(layer: &LayerSpec) -> usize {
    layer.weight_bias().expect("parameterized layer").0.shape()[0]
}

/// Inserts a normalization layer after every linear and conv layer.
///
/// In equivalence mode the layers are inserted front to back and each one is
/// estimated in the partially normalized network, so every insertion is an
/// exact identity. BN needs `batch` for equivalence; its projecting variants
/// only use it to fill in the recorded `(μ, σ)`.
pub fn introduce_normalization(
    net: &NetworkSpec,
    mode: NormMode,
    init: InitMode,
    batch: Option<&Tensor>,
    seed: u64,
) -> Result<NetworkSpec> {
    if mode == NormMode::None {
        return Err(Error::invalid("introduce_normalization", "mode none cannot be introduced"));
    }
    if net.has_norm() {
        return Err(Error::invalid("introduce_normalization", "network is already normalized"));
    }
    if mode == NormMode::Bn && init == InitMode::Equivalence && batch.is_none() {
        return Err(Error::invalid("introduce_normalization", "equivalence-preserving BN needs a statistics batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SCALE_STREAM, 0));
    let mut out = net.clone();
    let mut i = 0;
    while i < out.layers.len() {
        if !out.layers[i].is_parameterized() {
            i += 1;
            continue;
        }
        let c = out_channels(&out.layers[i]);
        let mut state = NormState::new(mode, c);
        if init == InitMode::ProjectingRandomScale {
            state.scale = Tensor::from_fn(vec![c], |_| rng.gen::<f32>());
        }
        out.layers.insert(i + 1, LayerSpec::Norm(state));
        if init == InitMode::Equivalence {
            let est = out.estimate_norm_stats(i + 1, batch)?;
            let state = out.norm_state_mut(i + 1).expect("just inserted");
            state.scale = Tensor::from_f64(vec![c], &est.sigma)?;
            state.shift = Tensor::from_f64(vec![c], &est.mu)?;
            state.mu = state.shift.clone();
            state.sigma = state.scale.clone();
        }
        i += 2;
    }
    if init != InitMode::Equivalence && (mode != NormMode::Bn || batch.is_some()) {
        out.refresh_norm_estimates(batch)?;
    }
    out.layer_shapes()?;
    Ok(out)
}

/// Folds every normalization layer into the linear or conv layer before it:
/// `W ← W·s/σ`, `bias ← (bias − μ)·s/σ + b`, per output channel.
///
/// BN layers are converted with the statistics of `batch`, which is required.
pub fn strip_normalization(net: &NetworkSpec, batch: Option<&Tensor>) -> Result<NetworkSpec> {
    let indices = net.norm_indices();
    for &i in &indices {
        if i == 0 || !net.layers[i - 1].is_parameterized() {
            return Err(Error::Layer { index: i, detail: "normalization layer is not directly preceded by a linear or conv layer".into() });
        }
        if net.norm_state(i).map(|s| s.mode) == Some(NormMode::Bn) && batch.is_none() {
            return Err(Error::invalid("strip_normalization", "BN layers need a conversion batch"));
        }
    }
    let estimates = net.estimate_all_norm_stats(batch)?;
    let mut out = net.clone();
    for (i, est) in estimates.into_iter().rev() {
        let LayerSpec::Norm(state) = out.layers.remove(i) else { unreachable!("index came from norm_indices") };
        let (s, b) = (state.scale.to_f64(), state.shift.to_f64());
        match &mut out.layers[i - 1] {
            LayerSpec::Linear { weight, bias } | LayerSpec::Conv { weight, bias, .. } => {
                let mut w = weight.to_f64();
                let mut a = bias.to_f64();
                let row = w.len() / a.len();
                for c in 0..a.len() {
                    let k = s[c] / est.sigma[c];
                    w[c * row..(c + 1) * row].iter_mut().for_each(|v| *v *= k);
                    a[c] = (a[c] - est.mu[c]) * k + b[c];
                }
                *weight = Tensor::from_f64(weight.shape().to_vec(), &w)?;
                *bias = Tensor::from_f64(bias.shape().to_vec(), &a)?;
            }
            _ => unreachable!("checked above"),
        }
    }
    Ok(out)
}
