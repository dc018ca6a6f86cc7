//! Adam, the loss meter, bounded Brent search and the training driver.

mod brent;
mod train;

use std::fmt;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::layers::NormMode;

pub use brent::{brent_min, BrentResult};
pub use train::{evaluate, lr_search, prepare, search_objective, train, BatchRecord, EpochRecord, LrSearch, TrainOutcome};

/// Adam with bias correction; moments are kept in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every tensor in `params`. `names` label the tensors in
    /// error messages.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::shape("adam", "parameter and gradient shapes differ"));
        }
        for (k, g) in grads.iter().enumerate() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                let name = names.get(k).cloned().unwrap_or_else(|| format!("tensor {k}"));
                return Err(Error::NonFinite { context: format!("gradient of {name}"), index: i, value: g[i] });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::shape("adam", "parameter layout changed between steps"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · factor^epoch`.
pub fn scheduled_lr(lr0: f64, factor: f64, epoch: usize) -> f64 {
    lr0 * factor.powi(epoch as i32)
}

/// Exponentially weighted mean whose weights fall to 0.1 over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningLoss {
    pub beta: f64,
    pub estimate: f64,
    pub updates: u64,
}

impl RunningLoss {
    pub fn new(batches_per_epoch: usize) -> Result<Self> {
        if batches_per_epoch == 0 {
            return Err(Error::invalid("running loss", "zero batches per epoch"));
        }
        Ok(RunningLoss { beta: 0.1f64.powf(1.0 / batches_per_epoch as f64), estimate: f64::NAN, updates: 0 })
    }

    pub fn update(&mut self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite { context: "running loss input".into(), index: self.updates as usize, value: x });
        }
        self.estimate = if self.updates == 0 { x } else { self.beta * self.estimate + (1.0 - self.beta) * x };
        self.updates += 1;
        Ok(self.estimate)
    }
}

/// Which normalization the network is prepared with before training starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitProtocol {
    /// Random weights; normalization is introduced equivalence-preserving.
    #[default]
    None,
    /// Projecting BN introduction; other modes go through a one-batch conversion.
    Bn,
    /// Projecting AP2 introduction; other modes go through conversion.
    Ap2,
}

impl InitProtocol {
    pub fn name(self) -> &'static str {
        match self {
            InitProtocol::None => "none",
            InitProtocol::Bn => "bn",
            InitProtocol::Ap2 => "ap2",
        }
    }
}

impl fmt::Display for InitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitProtocol::None, InitProtocol::Bn, InitProtocol::Ap2]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("init protocol", format!("unknown init {s:?} (none|bn|ap2)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub seed: u64,
    pub norm: NormMode,
    pub init: InitProtocol,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-epoch learning-rate factor.
    pub decay: f64,
    pub augment: AugmentConfig,
    pub detach_stats: bool,
    /// Training horizon of one lr-search evaluation.
    pub search_epochs: usize,
    pub search_iters: usize,
    /// Bounds on `log10(lr)`.
    pub search_bounds: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr0: 1e-3,
            epochs: 5,
            seed: 0,
            norm: NormMode::None,
            init: InitProtocol::None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay: 0.96,
            augment: AugmentConfig::default(),
            detach_stats: false,
            search_epochs: 5,
            search_iters: 10,
            search_bounds: (-6.0, -2.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::invalid("train config", format!("lr0 {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch size 0"));
        }
        if !(self.augment.noise_var >= 0.0) {
            return Err(Error::invalid("train config", format!("noise variance {}", self.augment.noise_var)));
        }
        if !(self.search_bounds.0 < self.search_bounds.1) {
            return Err(Error::invalid("train config", format!("search bounds {:?}", self.search_bounds)));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.beta1, self.beta2, self.adam_eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names() -> Vec<String> {
        vec!["w".into()]
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![vec![1.5, -2.0]];
        let mut adam = Adam::default();
        adam.step(&mut p, &[vec![0.0, 0.0]], 0.1, &names()).unwrap();
        assert_eq!(p, vec![vec![1.5, -2.0]]);
    }

    #[test]
    fn first_step_has_unit_scale() {
        for g in [0.5, 7.0, -40.0] {
            let mut p = vec![vec![0.0]];
            Adam::default().step(&mut p, &[vec![g]], 0.01, &names()).unwrap();
            let step = p[0][0].abs();
            assert!((step - 0.01).abs() / 0.01 < 1e-6, "{g}: {step}");
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = vec![vec![1.0]];
        let mut adam = Adam::default();
        for _ in 0..200 {
            let g = vec![vec![2.0 * p[0][0]]];
            adam.step(&mut p, &g, 0.1, &names()).unwrap();
        }
        assert!(p[0][0].abs() < 0.05, "{}", p[0][0]);
    }

    #[test]
    fn nan_gradient_names_the_tensor() {
        let mut p = vec![vec![0.0], vec![0.0, 0.0]];
        let names = vec!["p0_weight".to_string(), "p2_bias".to_string()];
        let err = Adam::default().step(&mut p, &[vec![1.0], vec![0.0, f64::NAN]], 0.1, &names).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("p2_bias") && err.is_numerical(), "{text}");
        assert_eq!(p, vec![vec![0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn schedule_is_geometric() {
        assert_eq!(scheduled_lr(0.5, 0.96, 0), 0.5);
        assert!((scheduled_lr(1.0, 0.96, 50) - 0.96f64.powi(50)).abs() < 1e-15);
        assert!((1.0 / scheduled_lr(1.0, 0.96, 50) - 7.69).abs() < 0.01);
    }

    #[test]
    fn running_loss_weights() {
        assert!((RunningLoss::new(1).unwrap().beta - 0.1).abs() < 1e-15);
        assert!((RunningLoss::new(469).unwrap().beta - 0.99510).abs() < 1e-5);
        let mut m = RunningLoss::new(10).unwrap();
        assert_eq!(m.update(4.0).unwrap(), 4.0);
        for _ in 0..500 {
            m.update(2.0).unwrap();
        }
        assert!((m.estimate - 2.0).abs() < 1e-9);
        assert!(m.update(f64::INFINITY).is_err());
        assert!(RunningLoss::new(0).is_err());
    }

    #[test]
    fn reparametrization_scales_steps() {
        let grad = |theta: f64| 3.0 * (theta - 1.5);
        let (theta, lr) = (0.7, 0.01);
        let direct = -lr * grad(theta);
        let theta_p = theta / 2.0;
        let step_p = -lr * 2.0 * grad(2.0 * theta_p);
        let ratio = (2.0 * step_p) / direct;
        assert!((ratio - 4.0).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn protocol_names() {
        for p in [InitProtocol::None, InitProtocol::Bn, InitProtocol::Ap2] {
            assert_eq!(p.name().parse::<InitProtocol>().unwrap(), p);
        }
        assert!("bn-style".parse::<InitProtocol>().is_err());
    }

    proptest! {
        #[test]
        fn step_is_bounded_by_lr(gs in proptest::collection::vec(-1e3f64..1e3, 1..20), lr in 1e-5f64..1e-1) {
            let mut adam = Adam::default();
            let mut p = vec![0.0];
            for g in gs {
                let before = p[0];
                let mut params = vec![p.clone()];
                adam.step(&mut params, &[vec![g]], lr, &names()).unwrap();
                p = params.remove(0);
                let bound = lr * (1.0 - 0.9) / (1.0 - 0.999f64).sqrt() + 1e-12;
                prop_assert!((p[0] - before).abs() <= bound.max(lr) * 1.0001);
            }
        }
    }
}
