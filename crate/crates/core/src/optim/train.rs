use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{brent_min, scheduled_lr, InitProtocol, RunningLoss, TrainConfig};
use crate::data::{augment, batches_per_epoch, dataset_stats, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::layers::{introduce_normalization, strip_normalization, ForwardOptions, InitMode, NetworkSpec, NormMode};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const AUGMENT_STREAM: u64 = 0x6175_676d;
const STEP_STREAM: u64 = 0x7374_6570;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub running_loss: f64,
    pub lr: f64,
    /// Eval-mode loss over the training set, on the last batch of each epoch of a BN network.
    pub bn_eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NetworkSpec,
    pub batches: Vec<BatchRecord>,
    pub validation: Vec<EpochRecord>,
    pub final_running_loss: f64,
}

/// The unaugmented first batch of epoch 0, used for BN conversions.
fn conversion_batch(data: &Dataset, cfg: &TrainConfig) -> Result<Tensor> {
    let order = epoch_order(data.len(), cfg.seed, 0);
    Ok(data.batch(&order[..cfg.batch_size.min(order.len())])?.0)
}

/// Sets the input statistics from `data` and applies the init protocol of
/// `cfg` to a network without normalization layers.
pub fn prepare(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    if net.has_norm() {
        return Err(Error::invalid("prepare", "expected a network without normalization layers"));
    }
    let mut base = net.clone();
    base.input_stats = dataset_stats(data, cfg.augment.noise_var)?;
    let batch = conversion_batch(data, cfg)?;
    let plain = match cfg.init {
        InitProtocol::None => base,
        InitProtocol::Bn => {
            let bn = introduce_normalization(&base, NormMode::Bn, InitMode::ProjectingRandomScale, Some(&batch), cfg.seed)?;
            if cfg.norm == NormMode::Bn {
                return Ok(bn);
            }
            strip_normalization(&bn, Some(&batch))?
        }
        InitProtocol::Ap2 => {
            let ap = introduce_normalization(&base, NormMode::Ap2, InitMode::Projecting, None, cfg.seed)?;
            if cfg.norm == NormMode::Ap2 {
                return Ok(ap);
            }
            strip_normalization(&ap, None)?
        }
    };
    if cfg.norm == NormMode::None {
        return Ok(plain);
    }
    introduce_normalization(&plain, cfg.norm, InitMode::Equivalence, Some(&batch), cfg.seed)
}

/// Mean loss and accuracy over `data`, evaluated in batches.
pub fn evaluate(net: &NetworkSpec, data: &Dataset, batch_size: usize, training: bool) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let params = net.param_values();
    let (mut loss, mut correct) = (0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let opts = ForwardOptions { training, ..Default::default() };
        let mut fwd = crate::layers::forward_tape(net, &params, &x, opts)?;
        let out = fwd.output_tensor()?;
        let nll = fwd.nll(&y)?;
        loss += fwd.tape.value(nll)[0] * chunk.len() as f64;
        let classes = out.shape()[1];
        for (row, &label) in out.data().chunks_exact(classes).zip(&y) {
            let best = row.iter().enumerate().fold((0, f32::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            correct += usize::from(best.0 == label);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Trains a prepared network with Adam and the per-epoch schedule.
pub fn train(net: &NetworkSpec, data: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut net = net.clone();
    let names: Vec<String> = net.param_refs().iter().map(|r| r.to_string()).collect();
    let mut params = net.param_values();
    let mut adam = cfg.adam();
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    let mut meter = RunningLoss::new(per_epoch)?;
    let has_bn = net.norm_indices().iter().any(|&i| net.norm_state(i).map(|s| s.mode) == Some(NormMode::Bn));
    let mut batches = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut val_records = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.lr0, cfg.decay, epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUGMENT_STREAM, epoch as u64));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(chunk)?;
            let x = augment(&x, &cfg.augment, &mut rng)?;
            let opts = ForwardOptions { training: true, detach_stats: cfg.detach_stats, seed: derive_seed(cfg.seed, STEP_STREAM, step) };
            let (loss, grads, records) = net.loss_and_grads_at(&params, &x, &y, opts)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { context: format!("training loss at epoch {epoch}, batch {b}"), index: 0, value: loss });
            }
            adam.step(&mut params, &grads, lr, &names)?;
            net.apply_norm_records(&records)?;
            let running_loss = meter.update(loss)?;
            batches.push(BatchRecord { epoch, batch: b, loss, running_loss, lr, bn_eval_loss: None });
            step += 1;
        }
        net.set_param_values(&params)?;
        if has_bn {
            let (eval_loss, _) = evaluate(&net, data, cfg.batch_size, false)?;
            batches.last_mut().expect("at least one batch").bn_eval_loss = Some(eval_loss);
        }
        if let Some(val) = validation {
            let (val_loss, val_accuracy) = evaluate(&net, val, cfg.batch_size, false)?;
            val_records.push(EpochRecord { epoch, val_loss, val_accuracy });
        }
    }
    net.set_param_values(&params)?;
    Ok(TrainOutcome { net, batches, validation: val_records, final_running_loss: meter.estimate })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearch {
    pub lr: f64,
    pub log10_lr: f64,
    /// Final running loss at the chosen rate.
    pub loss: f64,
    /// `(log10 lr, loss)` of every evaluation; diverged runs are NaN.
    pub probes: Vec<(f64, f64)>,
}

/// Final running loss after `cfg.search_epochs` epochs at `lr0`, NaN if training diverged.
pub fn search_objective(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig, lr0: f64) -> Result<f64> {
    let cfg = TrainConfig { lr0, epochs: cfg.search_epochs, ..cfg.clone() };
    match train(net, data, None, &cfg) {
        Ok(out) => Ok(out.final_running_loss),
        Err(e) if e.is_numerical() => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Bounded Brent search over `log10(lr)`. Every evaluation trains a copy of
/// the same prepared network with the same seed.
pub fn lr_search(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<LrSearch> {
    cfg.validate()?;
    let failure = RefCell::new(None);
    let objective = |u: f64| {
        if failure.borrow().is_some() {
            return f64::NAN;
        }
        search_objective(net, data, cfg, 10f64.powf(u)).unwrap_or_else(|e| {
            *failure.borrow_mut() = Some(e);
            f64::NAN
        })
    };
    let (lo, hi) = cfg.search_bounds;
    let result = brent_min(objective, lo, hi, cfg.search_iters, 1e-5);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let r = result?;
    Ok(LrSearch { lr: 10f64.powf(r.x), log10_lr: r.x, loss: r.fx, probes: r.probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::layers::{mlp, Activation, WeightInit};

    fn blobs() -> Dataset {
        synthetic_blobs(512, 3, 4, 6.0, 11).unwrap()
    }

    fn small_net() -> NetworkSpec {
        mlp(vec![4], &[8], 3, Activation::Relu, WeightInit::Normal, 2).unwrap()
    }

    fn cfg(norm: NormMode, init: InitProtocol) -> TrainConfig {
        TrainConfig { batch_size: 64, lr0: 1e-2, epochs: 3, seed: 4, norm, init, ..Default::default() }
    }

    #[test]
    fn every_protocol_prepares_every_mode() {
        let data = blobs();
        for init in [InitProtocol::None, InitProtocol::Bn, InitProtocol::Ap2] {
            for norm in NormMode::ALL {
                let c = cfg(norm, init);
                let net = prepare(&small_net(), &data, &c).unwrap();
                assert_eq!(net.has_norm(), norm != NormMode::None, "{init} {norm}");
                let norms = net.norm_indices();
                assert!(norms.iter().all(|&i| net.norm_state(i).unwrap().mode == norm));
            }
        }
    }

    #[test]
    fn equivalence_protocol_keeps_the_function() {
        let data = blobs();
        let base = prepare(&small_net(), &data, &cfg(NormMode::None, InitProtocol::None)).unwrap();
        let x = data.take(32).unwrap().images;
        for norm in [NormMode::Ap2, NormMode::Wn] {
            let net = prepare(&small_net(), &data, &cfg(norm, InitProtocol::None)).unwrap();
            let d = net.forward(&x, true).unwrap().max_abs_diff(&base.forward(&x, true).unwrap()).unwrap();
            assert!(d < 1e-5, "{norm}: {d}");
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = blobs();
        let c = cfg(NormMode::Ap2, InitProtocol::Ap2);
        let net = prepare(&small_net(), &data, &c).unwrap();
        let a = train(&net, &data, Some(&data), &c).unwrap();
        let b = train(&net, &data, Some(&data), &c).unwrap();
        assert_eq!(a.batches, b.batches);
        assert_eq!(a.batches.len(), 3 * 8);
        assert!(a.batches.last().unwrap().running_loss < a.batches[0].loss);
        assert!(a.validation.last().unwrap().val_accuracy > 0.9);
        assert!(a.batches.iter().all(|r| r.bn_eval_loss.is_none()));
        assert_eq!(a.batches[8].lr, 1e-2 * 0.96);
    }

    #[test]
    fn bn_runs_record_eval_loss() {
        let data = blobs();
        let c = cfg(NormMode::Bn, InitProtocol::Bn);
        let out = train(&prepare(&small_net(), &data, &c).unwrap(), &data, None, &c).unwrap();
        let evals: Vec<_> = out.batches.iter().filter_map(|r| r.bn_eval_loss).collect();
        assert_eq!(evals.len(), 3);
        assert!(out.batches[7].bn_eval_loss.is_some());
    }

    #[test]
    fn divergence_is_numerical() {
        let data = blobs();
        let mut c = cfg(NormMode::None, InitProtocol::None);
        c.lr0 = 1e30;
        let net = prepare(&small_net(), &data, &c).unwrap();
        match train(&net, &data, None, &c) {
            Err(e) => assert!(e.is_numerical(), "{e}"),
            Ok(out) => assert!(out.final_running_loss > 1.0),
        }
        assert!(search_objective(&net, &data, &c, 1e30).is_ok());
    }

    #[test]
    fn search_is_reproducible_and_bounded() {
        let data = synthetic_blobs(128, 2, 2, 4.0, 3).unwrap();
        let net = mlp(vec![2], &[], 2, Activation::Relu, WeightInit::Normal, 0).unwrap();
        let c = TrainConfig { batch_size: 32, search_epochs: 2, search_iters: 4, ..Default::default() };
        let net = prepare(&net, &data, &c).unwrap();
        let a = lr_search(&net, &data, &c).unwrap();
        assert_eq!(a, lr_search(&net, &data, &c).unwrap());
        assert!(a.probes.len() <= 5);
        assert!(a.probes.iter().all(|p| (-6.0..=-2.0).contains(&p.0)));
        assert!((a.lr.log10() - a.log10_lr).abs() < 1e-12);
    }
}
