//! Small-scale training experiments: learning-rate grids, whitening method
//! comparisons, group-size sweeps and Fisher conditioning during training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{fim_condition, DiagError};
use crate::exec::Exec;
use crate::net::{init_params, Layer, LayerSpec, NetworkSpec};
use crate::norm::{Backend, DegeneratePolicy, NormMode, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::train::{train, train_observed, EpochMetrics, TrainConfig, TrainError};

/// Normalization inserted before every hidden ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Plain,
    Bn,
    Dbn {
        mode: NormMode,
        #[serde(default)]
        group_size: Option<usize>,
    },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Plain => "plain".into(),
            Method::Bn => "bn".into(),
            Method::Dbn { mode, group_size } => {
                let mode = match mode {
                    NormMode::Zca => "zca",
                    NormMode::Pca => "pca",
                    NormMode::Bn => "bn",
                };
                match group_size {
                    Some(k) => format!("dbn-{mode}-g{k}"),
                    None => format!("dbn-{mode}"),
                }
            }
        }
    }

    /// Layer inserted before each activation; degenerate spectra are clamped
    /// so long runs do not abort on a transient near-tie.
    pub fn layer(&self) -> Option<LayerSpec> {
        match *self {
            Method::Plain => None,
            Method::Bn => Some(LayerSpec::bn()),
            Method::Dbn { mode, group_size } => Some(LayerSpec::Dbn {
                mode,
                group_size,
                epsilon: DEFAULT_EPSILON,
                momentum: DEFAULT_MOMENTUM,
                affine: false,
                degenerate: DegeneratePolicy::Clamp,
                backend: Backend::Simplified,
            }),
        }
    }

    pub fn mlp(&self, input_dim: usize, hidden: &[usize], classes: usize) -> NetworkSpec {
        NetworkSpec::mlp(input_dim, hidden, classes, self.layer().as_ref())
    }
}

/// One training run of a grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Run {
    pub lr: f64,
    /// `None` when training diverged.
    pub log: Option<Vec<EpochMetrics>>,
}

impl Run {
    pub fn final_loss(&self) -> f64 {
        self.log.as_ref().and_then(|l| l.last()).map_or(f64::INFINITY, |m| m.train_loss)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.log.as_ref().and_then(|l| l.last()).map_or(0.0, |m| m.train_acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub method: String,
    pub runs: Vec<Run>,
    /// Index into `runs` of the lowest final training loss.
    pub best: usize,
}

impl GridResult {
    pub fn best_run(&self) -> &Run {
        &self.runs[self.best]
    }
}

/// Trains one freshly initialized copy of `spec` per learning rate and keeps
/// the one with the lowest final training loss. Cells run through `exec`.
pub fn lr_grid(
    spec: &NetworkSpec,
    init_seed: u64,
    data: &Dataset,
    base: &TrainConfig,
    lrs: &[f64],
    exec: Exec,
) -> Result<Vec<Run>, TrainError> {
    let runs = exec.map_slice(lrs, |&lr| -> Result<Run, TrainError> {
        let mut net = init_params(spec, init_seed)?;
        let cfg = TrainConfig { lr, ..base.clone() };
        match train(&mut net, data, None, &cfg) {
            Ok(log) => Ok(Run { lr, log: Some(log) }),
            Err(TrainError::Diverged { .. }) => Ok(Run { lr, log: None }),
            Err(e) => Err(e),
        }
    });
    runs.into_iter().collect()
}

fn best_index(runs: &[Run]) -> usize {
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.final_loss() < runs[best].final_loss() {
            best = i;
        }
    }
    best
}

/// Settings for [`compare_methods`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    pub hidden: Vec<usize>,
    pub methods: Vec<Method>,
    pub lrs: Vec<f64>,
    pub train: TrainConfig,
    #[serde(default)]
    pub init_seed: u64,
}

/// Best-of-grid training curves for each method on the same data and
/// initialization seed.
pub fn compare_methods(data: &Dataset, cfg: &ComparisonConfig, exec: Exec) -> Result<Vec<GridResult>, TrainError> {
    if cfg.lrs.is_empty() {
        return Err(TrainError::InvalidConfig("at least one learning rate is required".into()));
    }
    let mut out = Vec::with_capacity(cfg.methods.len());
    for method in &cfg.methods {
        let spec = method.mlp(data.dim(), &cfg.hidden, data.classes);
        let runs = lr_grid(&spec, cfg.init_seed, data, &cfg.train, &cfg.lrs, exec)?;
        out.push(GridResult { method: method.name(), best: best_index(&runs), runs });
    }
    Ok(out)
}

/// Condition number of the last linear layer's empirical Fisher, recorded
/// every `every` iterations while training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditioningTrace {
    pub method: String,
    pub iterations: Vec<usize>,
    pub condition: Vec<f64>,
    pub log: Vec<EpochMetrics>,
}

pub fn conditioning_trace(
    data: &Dataset,
    method: Method,
    hidden: &[usize],
    cfg: &TrainConfig,
    init_seed: u64,
    every: usize,
) -> Result<ConditioningTrace, TrainError> {
    if every == 0 {
        return Err(TrainError::InvalidConfig("logging interval must be positive".into()));
    }
    let spec = method.mlp(data.dim(), hidden, data.classes);
    let mut net = init_params(&spec, init_seed)?;
    let last = net.layers().iter().rposition(|l| matches!(l, Layer::Linear { .. })).expect("mlp has a linear layer");
    let fim = |net: &crate::net::Network| {
        fim_condition(net, data, last).map_err(|e| match e {
            DiagError::Net(n) => TrainError::Net(n),
            other => TrainError::Observer(other.to_string()),
        })
    };
    let mut iterations = vec![0];
    let mut condition = vec![fim(&net)?];
    let log = train_observed(&mut net, data, None, cfg, |step, net| {
        if step.iteration % every == 0 {
            iterations.push(step.iteration);
            condition.push(fim(net)?);
        }
        Ok(())
    })?;
    Ok(ConditioningTrace { method: method.name(), iterations, condition, log })
}

/// Group size in a gradient-check grid: a fixed size, half the dimension or
/// the whole dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupChoice {
    Size(usize),
    Named(NamedGroup),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedGroup {
    Half,
    Full,
}

impl GroupChoice {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            GroupChoice::Size(k) => k,
            GroupChoice::Named(NamedGroup::Half) => (d / 2).max(1),
            GroupChoice::Named(NamedGroup::Full) => d,
        }
    }
}

fn default_grad_dims() -> Vec<usize> {
    vec![2, 4, 8]
}
fn default_grad_batches() -> Vec<usize> {
    vec![16, 64]
}
fn default_grad_groups() -> Vec<GroupChoice> {
    vec![GroupChoice::Size(1), GroupChoice::Named(NamedGroup::Half), GroupChoice::Named(NamedGroup::Full)]
}
fn default_grad_modes() -> Vec<NormMode> {
    vec![NormMode::Zca, NormMode::Pca, NormMode::Bn]
}
fn default_step() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradGridConfig {
    #[serde(default = "default_grad_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_grad_batches")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_grad_groups")]
    pub group_sizes: Vec<GroupChoice>,
    #[serde(default = "default_grad_modes")]
    pub modes: Vec<NormMode>,
    #[serde(default = "default_step")]
    pub h: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GradGridConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub d: usize,
    pub m: usize,
    pub group_size: usize,
    pub mode: NormMode,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradGridReport {
    pub tolerance: f64,
    pub cases: Vec<GradCase>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Overall scale of [`separated_input`]. Whitening ignores it, but it sets
/// how a fixed finite-difference step compares with the data: at unit scale
/// roundoff dominates the central difference, much smaller and truncation does.
pub const GRADCHECK_INPUT_SCALE: f64 = 0.05;

/// Inputs with covariance eigenvalues roughly proportional to `1, 4, 9, …`
/// so every case has a comfortable eigengap.
pub fn separated_input(d: usize, m: usize, seed: u64) -> crate::linalg::Matrix {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = crate::seed::substream(seed, &format!("experiments/gradcheck/input/{d}x{m}"));
    let z = crate::linalg::Matrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    // A fixed rotation keeps the data correlated across coordinates.
    let q = crate::linalg::sym_eig(&crate::linalg::Matrix::from_fn(d, d, |i, j| 1.0 / (1.0 + i as f64 + j as f64)))
        .expect("hilbert matrix is symmetric")
        .eigenvectors;
    let scales: Vec<f64> = (0..d).map(|i| 1.0 + i as f64).collect();
    q.matmul(&z.scale_rows(&scales)).add_column(&vec![0.5; d]).scale(GRADCHECK_INPUT_SCALE)
}

/// Finite-difference check of the normalization backward over a grid of
/// shapes, group sizes and modes, with loss `½‖X̂ − T‖²` for a random `T`.
pub fn gradcheck_grid(cfg: &GradGridConfig) -> Result<GradGridReport, DiagError> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut cases = Vec::new();
    for &d in &cfg.dims {
        for &m in &cfg.batch_sizes {
            let x = separated_input(d, m, cfg.seed);
            let mut rng = crate::seed::substream(cfg.seed, &format!("experiments/gradcheck/target/{d}x{m}"));
            let target = crate::linalg::Matrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut seen = Vec::new();
            for &g in &cfg.group_sizes {
                let k = g.resolve(d);
                for &mode in &cfg.modes {
                    let k = if mode == NormMode::Bn { 1 } else { k };
                    if seen.contains(&(k, mode)) {
                        continue;
                    }
                    seen.push((k, mode));
                    let mut norm = crate::norm::NormConfig::zca(k).with_backend(cfg.backend);
                    norm.mode = mode;
                    if let Some(eps) = cfg.epsilon {
                        norm = norm.with_epsilon(eps);
                    }
                    let state = crate::norm::DbnState::new(d, norm)?;
                    let r = crate::diagnostics::gradcheck_norm(&state, &x, &target, cfg.h)?;
                    cases.push(GradCase {
                        d,
                        m,
                        group_size: k,
                        mode,
                        max_rel_error: r.max_rel_error,
                        pass: r.max_rel_error < cfg.tolerance,
                    });
                }
            }
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = cases.iter().all(|c| c.pass);
    Ok(GradGridReport { tolerance: cfg.tolerance, cases, max_rel_error, pass })
}

/// Tuned desk-scale settings for the bundled experiments.
pub mod presets {
    use super::*;
    use crate::data::GaussianSpec;

    /// Stand-in for a 1,000-image digit subset: ten correlated Gaussian
    /// classes in 128 dimensions.
    pub fn digits_fallback() -> GaussianSpec {
        GaussianSpec { dim: 128, n: 1000, classes: 10, correlation: 0.5, separation: 3.0, seed: 1 }
    }

    /// Full-batch gradient descent over `{0.1, 0.5, 1, 5}` for `layers`-layer
    /// MLPs with 100 hidden units.
    pub fn mlp_comparison(layers: usize, methods: Vec<Method>) -> ComparisonConfig {
        ComparisonConfig {
            hidden: vec![100; layers.saturating_sub(1)],
            methods,
            lrs: vec![0.1, 0.5, 1.0, 5.0],
            train: TrainConfig::full_batch(0.1, 200),
            init_seed: 3,
        }
    }

    pub fn group_sweep_data() -> GaussianSpec {
        GaussianSpec { dim: 64, n: 4096, classes: 10, correlation: 0.9, separation: 1.5, seed: 1 }
    }

    /// 6-layer MLP (five hidden layers of 64), SGD with batch 128, ZCA
    /// whitening with group size `k`.
    pub fn group_sweep(group_sizes: &[usize]) -> ComparisonConfig {
        ComparisonConfig {
            hidden: vec![64; 5],
            methods: group_sizes.iter().map(|&k| Method::Dbn { mode: NormMode::Zca, group_size: Some(k) }).collect(),
            lrs: vec![0.1, 0.2, 0.5, 1.0, 2.0],
            train: TrainConfig { batch_size: 128, full_batch: false, shuffle: true, seed: 7, ..TrainConfig::full_batch(0.1, 10) },
            init_seed: 3,
        }
    }

    pub fn conditioning_data() -> GaussianSpec {
        GaussianSpec { dim: 32, n: 1000, classes: 4, correlation: 0.9, separation: 2.0, seed: 1 }
    }

    pub const CONDITIONING_HIDDEN: [usize; 3] = [64, 32, 16];

    pub fn conditioning_train() -> TrainConfig {
        TrainConfig::full_batch(0.5, 100)
    }

    pub fn conditioning_methods() -> Vec<Method> {
        vec![Method::Plain, Method::Bn, Method::Dbn { mode: NormMode::Zca, group_size: None }]
    }
}

/// Fraction of logged points where the traces are ordered
/// `traces[last] ≤ … ≤ traces[0]` (e.g. DBN ≤ BN ≤ plain).
pub fn ordering_fraction(traces: &[&[f64]]) -> f64 {
    let n = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    if n == 0 {
        return 0.0;
    }
    let ok = (0..n).filter(|&i| traces.windows(2).all(|w| w[1][i] <= w[0][i])).count();
    ok as f64 / n as f64
}
