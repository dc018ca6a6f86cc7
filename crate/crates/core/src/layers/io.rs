//! Model directories: `manifest.txt` plus one raw little-endian file per tensor.
//!
//! The manifest starts with `input <c,h,w>` followed by one line per layer,
//! `index kind args norm-mode`, where `args` is a comma-separated list without
//! spaces and `-` stands for "nothing". Tensors live in `p<index>_<role>.f32`;
//! the input statistics are stored as 64-bit floats in `input_mean.f64` and
//! `input_var.f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Activation, LayerSpec, NetworkSpec, NormMode, NormState};
use crate::error::{Error, Result};
use crate::moments::MomentPair;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_f32(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&dir.join(name), &bytes)
}

fn write_f64(dir: &Path, name: &str, v: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(&dir.join(name), &bytes)
}

/// Writes `net` into `dir`, creating it if needed.
pub fn save_model(net: &NetworkSpec, dir: &Path) -> Result<()> {
    net.layer_shapes()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("input {}\n", join(&net.input_shape));
    for (i, layer) in net.layers.iter().enumerate() {
        let (args, mode) = match layer {
            LayerSpec::Linear { weight, bias } => {
                write_f32(dir, &format!("p{i}_weight.f32"), weight)?;
                write_f32(dir, &format!("p{i}_bias.f32"), bias)?;
                (join(weight.shape()), "-".to_string())
            }
            LayerSpec::Conv { weight, bias, stride, pad } => {
                write_f32(dir, &format!("p{i}_weight.f32"), weight)?;
                write_f32(dir, &format!("p{i}_bias.f32"), bias)?;
                (format!("{},stride={stride},pad={pad}", join(weight.shape())), "-".to_string())
            }
            LayerSpec::Norm(s) => {
                for (role, t) in [
                    ("scale", &s.scale),
                    ("shift", &s.shift),
                    ("mu", &s.mu),
                    ("sigma", &s.sigma),
                    ("running_mean", &s.running_mean),
                    ("running_var", &s.running_var),
                ] {
                    write_f32(dir, &format!("p{i}_{role}.f32"), t)?;
                }
                (
                    format!("{},eps={:?},momentum={:?},updates={}", s.channels(), s.eps, s.momentum, s.running_updates),
                    s.mode.name().to_string(),
                )
            }
            LayerSpec::Activation(Activation::LeakyRelu(slope)) => (format!("slope={slope:?}"), "-".into()),
            LayerSpec::Dropout { keep_prob, scale } => (format!("keep={keep_prob:?},scale={scale:?}"), "-".into()),
            LayerSpec::Activation(_) | LayerSpec::Flatten | LayerSpec::GlobalAvgPool => ("-".into(), "-".into()),
        };
        writeln!(manifest, "{i} {} {args} {mode}", layer.kind()).expect("writing to a string");
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
    write_f64(dir, "input_mean.f64", &net.input_stats.mean)?;
    write_f64(dir, "input_var.f64", &net.input_stats.var)?;
    Ok(())
}

struct Reader<'a> {
    dir: &'a Path,
}

impl Reader<'_> {
    fn err(&self, path: PathBuf, detail: impl Into<String>) -> Error {
        Error::Model { path, detail: detail.into() }
    }

    fn bytes(&self, name: &str, elem: usize, count: usize) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != elem * count {
            return Err(self.err(path, format!("expected {} bytes, found {}", elem * count, bytes.len())));
        }
        Ok(bytes)
    }

    fn tensor(&self, name: &str, shape: Vec<usize>) -> Result<Tensor> {
        let count = shape.iter().product();
        let bytes = self.bytes(name, 4, count)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| self.err(self.dir.join(name), e.to_string()))
    }

    fn f64s(&self, name: &str, count: usize) -> Result<Vec<f64>> {
        let bytes = self.bytes(name, 8, count)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Splits `a,b,key=value` into positional values and keyed values.
fn parse_args(args: &str) -> (Vec<&str>, Vec<(&str, &str)>) {
    let mut pos = Vec::new();
    let mut keyed = Vec::new();
    if args != "-" {
        for part in args.split(',') {
            match part.split_once('=') {
                Some((k, v)) => keyed.push((k, v)),
                None => pos.push(part),
            }
        }
    }
    (pos, keyed)
}

/// Reads a model directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<NetworkSpec> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let r = Reader { dir };
    let bad = |line: usize, detail: String| r.err(manifest_path.clone(), format!("line {}: {detail}", line + 1));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| bad(0, "empty manifest".into()))?;
    let input_shape = match first.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["input", dims] => dims
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| bad(0, format!("bad input extent {d:?}"))))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(bad(0, "expected `input <shape>`".into())),
    };
    let mut layers = Vec::new();
    for (ln, line) in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let &[index, kind, args, mode] = tokens.as_slice() else {
            return Err(bad(ln, format!("expected 4 fields, found {}", tokens.len())));
        };
        let i: usize = index.parse().map_err(|_| bad(ln, format!("bad index {index:?}")))?;
        if i != layers.len() {
            return Err(bad(ln, format!("layer index {i}, expected {}", layers.len())));
        }
        let (pos, keyed) = parse_args(args);
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, format!("bad number {s:?}")));
        let key = |k: &str| keyed.iter().find(|(name, _)| *name == k).map(|(_, v)| *v).ok_or_else(|| bad(ln, format!("missing {k}=")));
        let float = |k: &str| key(k).and_then(|v| v.parse::<f64>().map_err(|_| bad(ln, format!("bad {k} {v:?}"))));
        let layer = match kind {
            "linear" | "conv" => {
                let shape = pos.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
                let expected = if kind == "linear" { 2 } else { 4 };
                if shape.len() != expected {
                    return Err(bad(ln, format!("{kind} needs {expected} extents")));
                }
                let weight = r.tensor(&format!("p{i}_weight.f32"), shape.clone())?;
                let bias = r.tensor(&format!("p{i}_bias.f32"), vec![shape[0]])?;
                if kind == "linear" {
                    LayerSpec::Linear { weight, bias }
                } else {
                    LayerSpec::Conv { weight, bias, stride: num(key("stride")?)?, pad: num(key("pad")?)? }
                }
            }
            "norm" => {
                let &[c] = pos.as_slice() else {
                    return Err(bad(ln, "norm needs a channel count".into()));
                };
                let c = num(c)?;
                let mode: NormMode = mode.parse().map_err(|_| bad(ln, format!("bad norm mode {mode:?}")))?;
                let t = |role: &str| r.tensor(&format!("p{i}_{role}.f32"), vec![c]);
                LayerSpec::Norm(NormState {
                    mode,
                    scale: t("scale")?,
                    shift: t("shift")?,
                    mu: t("mu")?,
                    sigma: t("sigma")?,
                    running_mean: t("running_mean")?,
                    running_var: t("running_var")?,
                    running_updates: key("updates")?.parse().map_err(|_| bad(ln, "bad updates".into()))?,
                    eps: float("eps")?,
                    momentum: float("momentum")?,
                })
            }
            "relu" => LayerSpec::Activation(Activation::Relu),
            "sigmoid" => LayerSpec::Activation(Activation::Sigmoid),
            "log_softmax" => LayerSpec::Activation(Activation::LogSoftmax),
            "leaky_relu" => LayerSpec::Activation(Activation::LeakyRelu(key("slope")?.parse().map_err(|_| bad(ln, "bad slope".into()))?)),
            "dropout" => LayerSpec::Dropout {
                keep_prob: key("keep")?.parse().map_err(|_| bad(ln, "bad keep".into()))?,
                scale: key("scale")?.parse().map_err(|_| bad(ln, "bad scale".into()))?,
            },
            "flatten" => LayerSpec::Flatten,
            "global_avg_pool" => LayerSpec::GlobalAvgPool,
            other => return Err(bad(ln, format!("unknown layer kind {other:?}"))),
        };
        layers.push(layer);
    }
    let channels = *input_shape.first().ok_or_else(|| bad(0, "empty input shape".into()))?;
    let input_stats = MomentPair::new(r.f64s("input_mean.f64", channels)?, r.f64s("input_var.f64", channels)?)
        .map_err(|e| r.err(dir.join("input_var.f64"), e.to_string()))?;
    NetworkSpec::new(input_shape, layers, input_stats).map_err(|e| r.err(manifest_path.clone(), e.to_string()))
}
