//! SGD with momentum and weight decay, learning-rate schedules and per-epoch
//! metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, BatchOptions, DataError, Dataset};
use crate::net::{NetError, Network};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("observer: {0}")]
    Observer(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss above this aborts training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

#[derive(Default, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Halve the rate every `iterations` updates.
    HalveEvery { iterations: usize },
    /// Divide the rate by `factor` once each listed epoch has started.
    DivideAt { epochs: Vec<usize>, factor: f64 },
}

impl Schedule {
    /// Rate for update `iteration` (0-based) during `epoch` (0-based).
    pub fn rate(&self, base: f64, iteration: usize, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::HalveEvery { iterations } => base * 0.5f64.powi((iteration / iterations) as i32),
            Schedule::DivideAt { epochs, factor } => {
                base / factor.powi(epochs.iter().filter(|&&e| epoch >= e).count() as i32)
            }
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Use the whole training set as one batch; `batch_size` is ignored.
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Record wall-clock seconds. Off by default so logs are reproducible.
    #[serde(default)]
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn full_batch(lr: f64, epochs: usize) -> Self {
        TrainConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            epochs,
            batch_size: 0,
            seed: 0,
            full_batch: true,
            shuffle: false,
            log_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !self.full_batch && self.batch_size == 0 {
            return bad("batch_size must be positive unless full_batch is set".into());
        }
        match &self.schedule {
            Schedule::HalveEvery { iterations: 0 } => return bad("halve_every needs a positive period".into()),
            Schedule::DivideAt { factor, .. } if !(*factor > 1.0) => {
                return bad(format!("divide_at factor must exceed 1, got {factor}"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// `v ← μ·v − lr·(g + wd·p)`, then `p ← p + v`.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Shape(format!(
            "{} parameter blocks, {} gradient blocks, {} velocity blocks",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(TrainError::Shape(format!("block {i}: {} params, {} grads, {} velocity", p.len(), g.len(), v.len())));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v - lr * (g + weight_decay * *p);
            *p += *v;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Updates performed so far.
    pub iteration: usize,
    /// Rate used for the last update of the epoch.
    pub lr: f64,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

/// What an observer sees after each update.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub fn train(net: &mut Network, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    train_observed(net, train_set, test_set, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `observe` after every parameter update.
pub fn train_observed<F>(
    net: &mut Network,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&Step, &Network) -> Result<()>,
{
    cfg.validate()?;
    let n = train_set.len();
    let batch_size = if cfg.full_batch { n } else { cfg.batch_size.min(n) };
    let opts = BatchOptions { batch_size, seed: cfg.seed, shuffle: cfg.shuffle && !cfg.full_batch, drop_partial: true };
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let start = Instant::now();
    let mut iteration = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut count = 0usize;
        let mut lr = cfg.lr;
        for (x, labels) in batches(train_set, opts, epoch)? {
            let trace = net.forward_train(&x, &labels)?;
            if !(trace.loss <= DIVERGENCE_THRESHOLD) {
                return Err(TrainError::Diverged { iteration, loss: trace.loss });
            }
            let grads = net.backward_params(&trace)?;
            lr = cfg.schedule.rate(cfg.lr, iteration, epoch);
            sgd_step(&mut net.params_mut(), &grads.params, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += trace.loss;
            acc_sum += trace.accuracy();
            count += 1;
            iteration += 1;
            observe(&Step { iteration, epoch, loss: trace.loss }, net)?;
        }
        let (test_loss, test_acc) = match test_set {
            Some(t) => {
                let e = net.evaluate(&t.features, &t.labels)?;
                (Some(e.loss), Some(e.accuracy))
            }
            None => (None, None),
        };
        log.push(EpochMetrics {
            epoch: epoch + 1,
            iteration,
            lr,
            train_loss: loss_sum / count as f64,
            train_acc: acc_sum / count as f64,
            test_loss,
            test_acc,
            seconds: if cfg.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        });
    }
    Ok(log)
}

pub fn write_metrics_csv<W: Write>(log: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if log.is_empty() {
        w.write_record(["epoch", "iteration", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "seconds"])?;
    }
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(log: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    write_metrics_csv(log, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_correlated_gaussians, GaussianSpec};
    use crate::net::{init_params, LayerSpec, NetworkSpec};
    use crate::norm::NormMode;

    fn step1(p: &mut Vec<f64>, g: f64, v: &mut Vec<f64>, lr: f64, mu: f64, wd: f64) {
        let grads = vec![vec![g; p.len()]];
        let mut vel = vec![std::mem::take(v)];
        sgd_step(&mut [p.as_mut_slice()], &grads, &mut vel, lr, mu, wd).unwrap();
        *v = vel.pop().unwrap();
    }

    #[test]
    fn single_vanilla_step() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        step1(&mut p, 1.0, &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, vec![-0.1]);
    }

    #[test]
    fn two_momentum_steps() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        // Hand recurrence: v₁ = -0.1, p₁ = -0.1; v₂ = 0.9·v₁ - 0.1 = -0.19, p₂ = -0.29.
        step1(&mut p, 1.0, &mut v, 0.1, 0.9, 0.0);
        step1(&mut p, 1.0, &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.29).abs() < 1e-15);
        assert!((v[0] + 0.19).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_geometrically() {
        let (mut p, mut v) = (vec![0.0], vec![1.0]);
        for k in 1..=5 {
            step1(&mut p, 0.0, &mut v, 0.1, 0.5, 0.0);
            assert_eq!(v[0], 0.5f64.powi(k));
        }
    }

    #[test]
    fn vanilla_reduction_is_exact() {
        let p0 = vec![0.3, -1.7, 2.5];
        let g = vec![0.11, -0.4, 3.0];
        let mut p = p0.clone();
        let mut v = vec![vec![0.0; 3]];
        sgd_step(&mut [p.as_mut_slice()], std::slice::from_ref(&g), &mut v, 0.05, 0.0, 0.0).unwrap();
        for i in 0..3 {
            assert_eq!(p[i], p0[i] - 0.05 * g[i]);
        }
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let (mut p, mut v) = (vec![2.0], vec![0.0]);
        step1(&mut p, 0.0, &mut v, 0.1, 0.0, 0.5);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn step_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut v = vec![vec![0.0; 2]];
        assert!(matches!(
            sgd_step(&mut [p.as_mut_slice()], &[vec![0.0; 3]], &mut v, 0.1, 0.0, 0.0),
            Err(TrainError::Shape(_))
        ));
    }

    #[test]
    fn schedules() {
        let halve = Schedule::HalveEvery { iterations: 10 };
        assert_eq!(halve.rate(1.0, 9, 0), 1.0);
        assert_eq!(halve.rate(1.0, 10, 0), 0.5);
        assert_eq!(halve.rate(1.0, 25, 3), 0.25);
        let divide = Schedule::DivideAt { epochs: vec![2, 4], factor: 5.0 };
        assert_eq!(divide.rate(1.0, 0, 1), 1.0);
        assert_eq!(divide.rate(1.0, 0, 2), 0.2);
        assert!((divide.rate(1.0, 0, 4) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::full_batch(0.1, 1);
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { full_batch: false, batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { schedule: Schedule::DivideAt { epochs: vec![1], factor: 1.0 }, ..ok.clone() }
            .validate()
            .is_err());
        let json = r#"{"lr": 0.1, "epochs": 3, "batch_size": 8, "typo": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    fn separable() -> Dataset {
        gen_correlated_gaussians(&GaussianSpec { dim: 2, n: 200, classes: 2, correlation: 0.3, separation: 12.0, seed: 4 })
            .unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = separable();
        let mut net = init_params(&NetworkSpec::mlp(2, &[], 2, None), 1).unwrap();
        let before = net.clone();
        let log = train(&mut net, &data, None, &TrainConfig::full_batch(0.1, 0)).unwrap();
        assert!(log.is_empty());
        assert_eq!(net.params(), before.params());
    }

    #[test]
    fn logistic_regression_separates() {
        let data = separable();
        let mut net = init_params(&NetworkSpec::mlp(2, &[], 2, None), 1).unwrap();
        let cfg = TrainConfig { batch_size: 20, full_batch: false, momentum: 0.9, seed: 3, ..TrainConfig::full_batch(0.1, 50) };
        let log = train(&mut net, &data, Some(&data), &cfg).unwrap();
        assert_eq!(log.len(), 50);
        assert!(log[49].test_acc.unwrap() >= 0.99, "{:?}", log[49]);
        assert_eq!(log[49].iteration, 500);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = gen_correlated_gaussians(&GaussianSpec { dim: 6, n: 96, classes: 3, correlation: 0.8, separation: 2.0, seed: 9 })
            .unwrap();
        let spec = NetworkSpec::mlp(6, &[8], 3, Some(&LayerSpec::dbn(NormMode::Zca, Some(4))));
        let cfg = TrainConfig { batch_size: 16, full_batch: false, momentum: 0.9, seed: 11, ..TrainConfig::full_batch(0.1, 4) };
        let run = || {
            let mut net = init_params(&spec, 5).unwrap();
            let log = train(&mut net, &data, Some(&data), &cfg).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&log, &mut buf).unwrap();
            (buf, net)
        };
        let (a, net_a) = run();
        let (b, net_b) = run();
        assert_eq!(a, b);
        assert_eq!(net_a, net_b);
        let header = String::from_utf8(a).unwrap();
        assert!(header.starts_with("epoch,iteration,lr,train_loss,train_acc,test_loss,test_acc,seconds\n"));
    }

    #[test]
    fn divergence_is_detected() {
        let data = separable();
        let mut net = init_params(&NetworkSpec::mlp(2, &[], 2, None), 1).unwrap();
        net.params_mut()[0].copy_from_slice(&[-1e4, -1e4, 1e4, 1e4]);
        let err = train(&mut net, &data, None, &TrainConfig::full_batch(0.1, 1)).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { iteration: 0, .. }));
        let mut nan_net = init_params(&NetworkSpec::mlp(2, &[], 2, None), 1).unwrap();
        nan_net.params_mut()[0][0] = f64::NAN;
        assert!(matches!(train(&mut nan_net, &data, None, &TrainConfig::full_batch(0.1, 1)), Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn observer_sees_every_update() {
        let data = separable();
        let mut net = init_params(&NetworkSpec::mlp(2, &[], 2, None), 1).unwrap();
        let mut seen = Vec::new();
        let cfg = TrainConfig { batch_size: 50, full_batch: false, ..TrainConfig::full_batch(0.1, 2) };
        train_observed(&mut net, &data, None, &cfg, |s, _| {
            seen.push(s.iteration);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (1..=8).collect::<Vec<_>>());
    }
}
