use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use apnorm::data::{dataset_stats, AugmentConfig, Dataset};
use apnorm::layers::{
    analytic_stats, cifar_cnn, introduce_normalization, load_model, mlp, mnist_mlp, save_model, strip_normalization, Activation,
    AnalyticStats, InitMode, NetworkSpec, NormMode, WeightInit,
};
use apnorm::moments::{leaky_relu_moments, relu_moments, sigmoid_moments, MomentPair, MomentScalar};
use apnorm::optim::{evaluate, lr_search, prepare, train as run_training, TrainConfig};
use apnorm::tensor::Tensor;
use apnorm::verify::{run_suite, Suite, VerifyOptions};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{io, CliError, CliResult};
use crate::source::load_limited;
use crate::{ConvertArgs, Direction, HiddenActivation, Init, MomentsPlotArgs, Nonlinearity, Preset, StatsArgs, TrainArgs, VerifyArgs};

const PROBE_SIZE: usize = 16;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn stats_csv(net: &NetworkSpec, stats: &AnalyticStats) -> String {
    let mut out = String::from("layer,kind,unit,mean,var\n");
    let rows = std::iter::once(("input", &stats.input)).chain(net.layers.iter().map(|l| l.kind()).zip(&stats.layers));
    for (i, (kind, pair)) in rows.enumerate() {
        let layer = if i == 0 { "input".to_string() } else { (i - 1).to_string() };
        for (u, (m, v)) in pair.mean.iter().zip(&pair.var).enumerate() {
            writeln!(out, "{layer},{kind},{u},{m},{v}").expect("writing to a string");
        }
    }
    out
}

pub fn stats(a: StatsArgs) -> CliResult<()> {
    let mut net = load_model(&a.model)?;
    let channels = net.input_shape[0];
    if a.standard_input_stats {
        net.input_stats = MomentPair::standard(channels);
    } else if let Some(src) = &a.data {
        let ds = load_limited(src, a.limit)?;
        if ds.example_shape() != net.input_shape.as_slice() {
            return Err(CliError::usage(format!("dataset examples {:?} do not fit model input {:?}", ds.example_shape(), net.input_shape)));
        }
        net.input_stats = dataset_stats(&ds, a.noise)?;
    }
    let stats = analytic_stats(&net)?;
    let csv = stats_csv(&net, &stats);
    if let Some(path) = &a.csv {
        write_text(path, &csv)?;
    }
    let mut table = format!("{:>6} {:<16} {:>6} {:>14} {:>14}\n", "layer", "kind", "unit", "mean", "var");
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (m, v): (f64, f64) = (f[3].parse().unwrap_or(f64::NAN), f[4].parse().unwrap_or(f64::NAN));
        writeln!(table, "{:>6} {:<16} {:>6} {m:>14.6e} {v:>14.6e}", f[0], f[1], f[2]).expect("writing to a string");
    }
    emit(&table)
}

/// Writes to stdout; a closed pipe ends the output quietly.
fn emit(text: &str) -> CliResult<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn build_preset(a: &TrainArgs, data: &Dataset) -> CliResult<NetworkSpec> {
    let init = match a.weight_init {
        Init::Normal => WeightInit::Normal,
        Init::Orthonormal => WeightInit::Orthonormal,
    };
    let net = match a.preset {
        Preset::MnistMlp => mnist_mlp(init, a.seed)?,
        Preset::CifarCnn => cifar_cnn(init, a.seed)?,
        Preset::Mlp => {
            let act = match a.activation {
                HiddenActivation::Sigmoid => Activation::Sigmoid,
                HiddenActivation::Relu => Activation::Relu,
            };
            mlp(data.example_shape().to_vec(), &a.hidden, data.classes, act, init, a.seed)?
        }
    };
    if data.example_shape() != net.input_shape.as_slice() {
        return Err(CliError::usage(format!(
            "dataset examples {:?} do not fit the {} preset input {:?}",
            data.example_shape(),
            a.preset.to_possible_value().expect("preset name").get_name(),
            net.input_shape
        )));
    }
    let outputs = net.output_shape()?.iter().product::<usize>();
    if data.classes > outputs {
        return Err(CliError::usage(format!("{} classes but the network has {outputs} outputs", data.classes)));
    }
    Ok(net)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let data = load_limited(&a.data, a.limit)?;
    let validation = a.validation.as_ref().map(|v| v.load()).transpose()?;
    let mut cfg = TrainConfig {
        batch_size: a.batch_size,
        lr0: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        norm: a.norm,
        init: a.init,
        augment: AugmentConfig { offset_range: a.offset_range, noise_var: a.noise, hflip: a.hflip },
        detach_stats: a.detach_stats,
        ..Default::default()
    };
    cfg.validate()?;
    let net = prepare(&build_preset(&a, &data)?, &data, &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    if a.lr_search {
        let search = lr_search(&net, &data, &cfg)?;
        let mut csv = String::from("log10_lr,loss\n");
        for (x, f) in &search.probes {
            writeln!(csv, "{x},{f}").expect("writing to a string");
        }
        write_text(&a.out.join("lr_search.csv"), &csv)?;
        println!("lr search: {} probes, lr {:.4e}, loss {:.6}", search.probes.len(), search.lr, search.loss);
        cfg.lr0 = search.lr;
    }
    let outcome = run_training(&net, &data, validation.as_ref(), &cfg)?;
    let with_bn = outcome.batches.iter().any(|b| b.bn_eval_loss.is_some());
    let mut csv = String::from("epoch,batch,loss,running_loss,lr");
    csv.push_str(if with_bn { ",bn_eval_loss\n" } else { "\n" });
    for b in &outcome.batches {
        write!(csv, "{},{},{},{},{}", b.epoch, b.batch, b.loss, b.running_loss, b.lr).expect("writing to a string");
        if with_bn {
            csv.push(',');
            if let Some(v) = b.bn_eval_loss {
                write!(csv, "{v}").expect("writing to a string");
            }
        }
        csv.push('\n');
    }
    write_text(&a.out.join("training.csv"), &csv)?;
    if validation.is_some() {
        let mut csv = String::from("epoch,val_loss,val_accuracy\n");
        for e in &outcome.validation {
            writeln!(csv, "{},{},{}", e.epoch, e.val_loss, e.val_accuracy).expect("writing to a string");
        }
        write_text(&a.out.join("validation.csv"), &csv)?;
    }
    save_model(&outcome.net, &a.out.join("model"))?;
    let (loss, accuracy) = evaluate(&outcome.net, &data, cfg.batch_size, false)?;
    println!(
        "trained {} epochs at lr {:.4e}: running loss {:.6}, training loss {loss:.6}, training accuracy {:.2}%",
        cfg.epochs,
        cfg.lr0,
        outcome.final_running_loss,
        accuracy * 100.0
    );
    if let Some(last) = outcome.validation.last() {
        println!("validation loss {:.6}, accuracy {:.2}%", last.val_loss, last.val_accuracy * 100.0);
    }
    Ok(())
}

fn gaussian_probe(net: &NetworkSpec, seed: u64) -> CliResult<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner: usize = net.input_shape[1..].iter().product();
    let c = net.input_shape[0];
    let mut shape = vec![PROBE_SIZE];
    shape.extend_from_slice(&net.input_shape);
    let stats = &net.input_stats;
    Ok(Tensor::from_fn(shape, |k| {
        let ch = (k / inner) % c;
        let z: f64 = StandardNormal.sample(&mut rng);
        (stats.mean[ch] + stats.var[ch].sqrt() * z) as f32
    }))
}

/// Statistics of what each linear or conv layer hands to the next nonlinearity.
fn fed_forward(net: &NetworkSpec) -> CliResult<Vec<MomentPair>> {
    let stats = analytic_stats(net)?;
    let mut out = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.is_parameterized() {
            let j = if net.norm_state(i + 1).is_some() { i + 1 } else { i };
            out.push(stats.layers[j].clone());
        }
    }
    Ok(out)
}

fn summary(p: &MomentPair) -> String {
    let max_mean = p.mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (lo, hi) = p.var.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    format!("max |mean| {max_mean:.4e}, var in [{lo:.4e}, {hi:.4e}]")
}

pub fn convert(a: ConvertArgs) -> CliResult<()> {
    let net = load_model(&a.model)?;
    let has_bn = net.norm_indices().iter().any(|&i| net.norm_state(i).map(|s| s.mode) == Some(NormMode::Bn));
    let needs_batch = match a.to {
        Direction::Normalized => a.mode == Some(NormMode::Bn) && a.init == InitMode::Equivalence,
        Direction::Unnormalized => has_bn,
    };
    if needs_batch && a.batch.is_none() {
        return Err(CliError::usage("converting BN statistics needs --batch"));
    }
    if a.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be positive"));
    }
    let batch = match &a.batch {
        Some(src) => {
            let ds = load_limited(src, Some(a.batch_size))?;
            if ds.example_shape() != net.input_shape.as_slice() {
                return Err(CliError::usage(format!(
                    "batch examples {:?} do not fit model input {:?}",
                    ds.example_shape(),
                    net.input_shape
                )));
            }
            Some(ds.images)
        }
        None => None,
    };
    let converted = match a.to {
        Direction::Normalized => {
            let mode = a.mode.ok_or_else(|| CliError::usage("--to normalized needs --mode bn|wn|ap2"))?;
            introduce_normalization(&net, mode, a.init, batch.as_ref(), a.seed)?
        }
        Direction::Unnormalized => strip_normalization(&net, batch.as_ref())?,
    };
    let uses_bn = has_bn || a.mode == Some(NormMode::Bn);
    let probe = match batch {
        Some(b) => b,
        None => gaussian_probe(&net, a.seed)?,
    };
    let deviation = net.forward(&probe, uses_bn)?.max_abs_diff(&converted.forward(&probe, uses_bn)?)?;
    println!("max output deviation on a {}-example probe batch: {deviation:.4e}", probe.shape()[0]);
    for (k, (pre, post)) in fed_forward(&net)?.iter().zip(&fed_forward(&converted)?).enumerate() {
        println!("weight layer {k}: before {}; after {}", summary(pre), summary(post));
    }
    save_model(&converted, &a.out)?;
    Ok(())
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::usage(format!("--range {s:?}: expected LO..HI with LO < HI"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if lo < hi && lo.is_finite() && hi.is_finite() {
        Ok((lo, hi))
    } else {
        Err(bad())
    }
}

pub fn moments_plot(a: MomentsPlotArgs) -> CliResult<()> {
    let (lo, hi) = parse_range(&a.range)?;
    if !(a.sigma > 0.0) || !a.sigma.is_finite() {
        return Err(CliError::usage(format!("--sigma {} must be positive", a.sigma)));
    }
    if a.points < 2 {
        return Err(CliError::usage("--points must be at least 2"));
    }
    let mut csv = String::from("mu,mu_prime,sigma_prime\n");
    for k in 0..a.points {
        let mu = lo + (hi - lo) * k as f64 / (a.points - 1) as f64;
        let x = MomentScalar::new(mu, a.sigma * a.sigma)?;
        let y = match a.nonlinearity {
            Nonlinearity::Relu => relu_moments(x),
            Nonlinearity::Sigmoid => sigmoid_moments(x),
            Nonlinearity::Lrelu => leaky_relu_moments(x, a.slope)?,
        };
        writeln!(csv, "{mu},{},{}", y.mean, y.var.sqrt()).expect("writing to a string");
    }
    match &a.out {
        Some(path) => write_text(path, &csv),
        None => emit(&csv),
    }
}

pub fn verify(a: VerifyArgs) -> CliResult<()> {
    let suites = if a.suite.is_empty() { Suite::ALL.to_vec() } else { a.suite };
    let opts = VerifyOptions { seed: a.seed, samples: a.samples, ..Default::default() };
    let mut failed = Vec::new();
    for suite in suites {
        let report = run_suite(suite, &opts)?;
        println!("{report}");
        if !report.passed() {
            failed.push(suite.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failing suites: {}", failed.join(", "))))
    }
}
