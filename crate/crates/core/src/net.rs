//! A feed-forward network with explicit backpropagation.
//!
//! Activations are `d × m` matrices, one column per example. The last layer
//! is always a fused softmax + negative log-likelihood.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::norm::{
    trelu_backward, trelu_forward, Backend, BatchStats, DbnState, DegeneratePolicy, ForwardCache, NormConfig,
    NormError, NormMode, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("stale cache: parameters or statistics changed since this forward pass")]
    StaleCache,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Norm(#[from] NormError),
}

pub type Result<T> = std::result::Result<T, NetError>;

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        /// Checked against the incoming width when given.
        #[serde(rename = "in", default, skip_serializing_if = "Option::is_none")]
        inputs: Option<usize>,
        out: usize,
    },
    Relu {},
    Trelu {},
    Bn {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        affine: bool,
    },
    Dbn {
        mode: NormMode,
        #[serde(default)]
        group_size: Option<usize>,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        affine: bool,
        #[serde(default)]
        degenerate: DegeneratePolicy,
        #[serde(default)]
        backend: Backend,
    },
    SoftmaxNll {},
}

impl LayerSpec {
    pub fn linear(out: usize) -> Self {
        LayerSpec::Linear { inputs: None, out }
    }

    pub fn bn() -> Self {
        LayerSpec::Bn { epsilon: DEFAULT_EPSILON, momentum: DEFAULT_MOMENTUM, affine: false }
    }

    pub fn dbn(mode: NormMode, group_size: Option<usize>) -> Self {
        LayerSpec::Dbn {
            mode,
            group_size,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            affine: false,
            degenerate: DegeneratePolicy::Error,
            backend: Backend::Simplified,
        }
    }

    fn norm_config(&self) -> Option<NormConfig> {
        match *self {
            LayerSpec::Bn { epsilon, momentum, affine } => {
                Some(NormConfig::bn().with_epsilon(epsilon).with_momentum(momentum).with_affine(affine))
            }
            LayerSpec::Dbn { mode, group_size, epsilon, momentum, affine, degenerate, backend } => Some(NormConfig {
                mode,
                group_size,
                epsilon,
                momentum,
                affine,
                degenerate,
                backend,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// `input → [linear → norm? → relu]* → linear → softmax`.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, norm: Option<&LayerSpec>) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::linear(h));
            if let Some(n) = norm {
                layers.push(n.clone());
            }
            layers.push(LayerSpec::Relu {});
        }
        layers.push(LayerSpec::linear(classes));
        layers.push(LayerSpec::SoftmaxNll {});
        NetworkSpec { input_dim, layers }
    }

    /// Width of the activation entering each layer, plus the final width.
    pub fn widths(&self) -> Result<Vec<usize>> {
        if self.input_dim == 0 {
            return Err(NetError::InvalidSpec("input dimension must be positive".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxNll {}) => {}
            _ => return Err(NetError::InvalidSpec("last layer must be softmax_nll".into())),
        }
        let mut widths = vec![self.input_dim];
        let mut cur = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { inputs, out } => {
                    if *out == 0 {
                        return Err(NetError::InvalidSpec(format!("layer {i}: zero-size linear layer")));
                    }
                    if let Some(n) = inputs {
                        if *n != cur {
                            return Err(NetError::InvalidSpec(format!("layer {i}: expects {n} inputs but receives {cur}")));
                        }
                    }
                    cur = *out;
                }
                LayerSpec::SoftmaxNll {} if i + 1 != self.layers.len() => {
                    return Err(NetError::InvalidSpec(format!("layer {i}: softmax_nll must be last")));
                }
                _ => {}
            }
            widths.push(cur);
        }
        Ok(widths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Linear { weight: Matrix, bias: Vec<f64> },
    Relu,
    Trelu { thresholds: Vec<f64> },
    Norm(DbnState),
    SoftmaxNll,
}

#[derive(Clone, Debug)]
enum LayerCache {
    Input(Matrix),
    Norm(ForwardCache),
    Softmax { probs: Matrix, labels: Vec<usize> },
}

/// Saved activations of one training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    generation: u64,
    caches: Vec<LayerCache>,
    pub loss: f64,
}

impl Trace {
    pub fn probs(&self) -> &Matrix {
        match self.caches.last() {
            Some(LayerCache::Softmax { probs, .. }) => probs,
            _ => unreachable!("network always ends in softmax"),
        }
    }

    pub fn accuracy(&self) -> f64 {
        match self.caches.last() {
            Some(LayerCache::Softmax { probs, labels }) => accuracy(probs, labels),
            _ => unreachable!("network always ends in softmax"),
        }
    }

    /// Input to layer `index` (for linear, activation and TReLU layers).
    pub fn layer_input(&self, index: usize) -> Option<&Matrix> {
        match self.caches.get(index) {
            Some(LayerCache::Input(x)) => Some(x),
            _ => None,
        }
    }
}

/// Gradients in [`Network::params`] order, plus the input gradient when
/// requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Option<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    #[serde(skip)]
    generation: u64,
}

/// Builds a network with `N(0, 1/fan_in)` weights, zero biases, unit scales
/// and zero shifts/thresholds. Deterministic given `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let widths = spec.widths()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let width = widths[i];
        let layer = match ls {
            LayerSpec::Linear { out, .. } => {
                let mut rng = seed::substream(seed, &format!("net/init/{i}"));
                let std = (1.0 / width as f64).sqrt();
                let weight = Matrix::from_fn(*out, width, |_, _| std * rng.sample::<f64, _>(StandardNormal));
                Layer::Linear { weight, bias: vec![0.0; *out] }
            }
            LayerSpec::Relu {} => Layer::Relu,
            LayerSpec::Trelu {} => Layer::Trelu { thresholds: vec![0.0; width] },
            LayerSpec::Bn { .. } | LayerSpec::Dbn { .. } => {
                Layer::Norm(DbnState::new(width, ls.norm_config().expect("norm layer"))?)
            }
            LayerSpec::SoftmaxNll {} => Layer::SoftmaxNll,
        };
        layers.push(layer);
    }
    Ok(Network { spec: spec.clone(), layers, generation: 0 })
}

fn softmax_columns(logits: &Matrix) -> Matrix {
    let (c, m) = logits.shape();
    let mut probs = Matrix::zeros(c, m);
    for j in 0..m {
        let max = (0..c).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let e = (logits[(i, j)] - max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for i in 0..c {
            probs[(i, j)] /= sum;
        }
    }
    probs
}

/// Mean NLL via log-sum-exp with max subtraction.
fn nll(logits: &Matrix, labels: &[usize]) -> f64 {
    let (c, m) = logits.shape();
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let max = (0..c).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|i| (logits[(i, j)] - max).exp()).sum::<f64>().ln();
        total += lse - logits[(y, j)];
    }
    total / m as f64
}

fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    let (c, m) = probs.shape();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(j, &y)| {
            let mut best = 0;
            for i in 1..c {
                if probs[(i, j)] > probs[(best, j)] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    correct as f64 / m as f64
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        *self.spec.widths().expect("validated").last().expect("non-empty")
    }

    /// Trainable parameter slices in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    out.push(weight.as_slice());
                    out.push(bias);
                }
                Layer::Trelu { thresholds } => out.push(thresholds),
                Layer::Norm(s) => {
                    if let (Some(g), Some(b)) = (&s.gamma, &s.beta) {
                        out.push(g);
                        out.push(b);
                    }
                }
                Layer::Relu | Layer::SoftmaxNll => {}
            }
        }
        out
    }

    /// Mutable parameter access. Invalidates outstanding traces.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    out.push(weight.as_mut_slice());
                    out.push(bias);
                }
                Layer::Trelu { thresholds } => out.push(thresholds),
                Layer::Norm(s) => {
                    if let (Some(g), Some(b)) = (&mut s.gamma, &mut s.beta) {
                        out.push(g);
                        out.push(b);
                    }
                }
                Layer::Relu | Layer::SoftmaxNll => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, x: &Matrix, labels: &[usize]) -> Result<()> {
        if x.rows() != self.spec.input_dim {
            return Err(NetError::Shape(format!("input has {} rows, network expects {}", x.rows(), self.spec.input_dim)));
        }
        if labels.len() != x.cols() {
            return Err(NetError::Shape(format!("{} labels for {} examples", labels.len(), x.cols())));
        }
        let classes = self.classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NetError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Training-mode forward that leaves the network untouched. Returns the
    /// trace and the batch statistics each normalization layer would fold in.
    pub fn forward_pure(&self, x: &Matrix, labels: &[usize]) -> Result<(Trace, Vec<Option<BatchStats>>)> {
        self.check_batch(x, labels)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut loss = f64::NAN;
        for layer in &self.layers {
            let (next, cache, stat) = match layer {
                Layer::Linear { weight, bias } => (weight.matmul(&cur).add_column(bias), LayerCache::Input(cur), None),
                Layer::Relu => (cur.map(|v| v.max(0.0)), LayerCache::Input(cur), None),
                Layer::Trelu { thresholds } => (trelu_forward(&cur, thresholds), LayerCache::Input(cur), None),
                Layer::Norm(state) => {
                    let (y, cache, s) = state.forward_batch(&cur)?;
                    (y, LayerCache::Norm(cache), Some(s))
                }
                Layer::SoftmaxNll => {
                    loss = nll(&cur, labels);
                    let probs = softmax_columns(&cur);
                    (Matrix::zeros(0, 0), LayerCache::Softmax { probs, labels: labels.to_vec() }, None)
                }
            };
            caches.push(cache);
            stats.push(stat);
            cur = next;
        }
        Ok((Trace { generation: self.generation, caches, loss }, stats))
    }

    /// Training-mode forward; updates running statistics.
    pub fn forward_train(&mut self, x: &Matrix, labels: &[usize]) -> Result<Trace> {
        let (mut trace, stats) = self.forward_pure(x, labels)?;
        for (layer, stat) in self.layers.iter_mut().zip(&stats) {
            if let (Layer::Norm(state), Some(s)) = (layer, stat) {
                state.update_running(s);
            }
        }
        self.generation += 1;
        trace.generation = self.generation;
        Ok(trace)
    }

    /// Training-mode loss without any mutation.
    pub fn training_loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(self.forward_pure(x, labels)?.0.loss)
    }

    /// Inference-mode logits (normalization layers use running statistics).
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.spec.input_dim {
            return Err(NetError::Shape(format!("input has {} rows, network expects {}", x.rows(), self.spec.input_dim)));
        }
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Linear { weight, bias } => weight.matmul(&cur).add_column(bias),
                Layer::Relu => cur.map(|v| v.max(0.0)),
                Layer::Trelu { thresholds } => trelu_forward(&cur, thresholds),
                Layer::Norm(state) => state.infer(&cur)?,
                Layer::SoftmaxNll => break,
            };
        }
        Ok(cur)
    }

    pub fn evaluate(&self, x: &Matrix, labels: &[usize]) -> Result<Evaluation> {
        self.check_batch(x, labels)?;
        let logits = self.logits(x)?;
        Ok(Evaluation { loss: nll(&logits, labels), accuracy: accuracy(&softmax_columns(&logits), labels) })
    }

    /// Gradient of the mean NLL with respect to the logits: `(P − Y)/m`.
    fn nll_gradient(&self, trace: &Trace) -> Result<Matrix> {
        let (probs, labels) = match trace.caches.last() {
            Some(LayerCache::Softmax { probs, labels }) => (probs, labels),
            _ => return Err(NetError::StaleCache),
        };
        let m = labels.len() as f64;
        let mut dlogits = probs.scale(1.0 / m);
        for (j, &y) in labels.iter().enumerate() {
            dlogits[(y, j)] -= 1.0 / m;
        }
        Ok(dlogits)
    }

    pub fn backward(&self, trace: &Trace) -> Result<Gradients> {
        self.backward_from_logits(trace, self.nll_gradient(trace)?, true)
    }

    /// Parameter gradients only; skips the input gradient of the first layer.
    pub fn backward_params(&self, trace: &Trace) -> Result<Gradients> {
        self.backward_from_logits(trace, self.nll_gradient(trace)?, false)
    }

    /// Backpropagates an arbitrary gradient at the logits.
    pub fn backward_from_logits(&self, trace: &Trace, dlogits: Matrix, with_input: bool) -> Result<Gradients> {
        if trace.generation != self.generation || trace.caches.len() != self.layers.len() {
            return Err(NetError::StaleCache);
        }
        let mut grad = dlogits;
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = match (layer, &trace.caches[i]) {
                (Layer::SoftmaxNll, LayerCache::Softmax { .. }) => grad,
                (Layer::Linear { weight, .. }, LayerCache::Input(x)) => {
                    per_layer[i] = vec![grad.matmul_t(x).into_vec(), grad.row_sums()];
                    if i == 0 && !with_input {
                        break;
                    }
                    weight.t_matmul(&grad)
                }
                (Layer::Relu, LayerCache::Input(x)) => grad.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }),
                (Layer::Trelu { thresholds }, LayerCache::Input(x)) => {
                    let (dx, dt) = trelu_backward(x, thresholds, &grad);
                    per_layer[i] = vec![dt];
                    dx
                }
                (Layer::Norm(state), LayerCache::Norm(cache)) => {
                    let g = state.backward(cache, &grad)?;
                    if let (Some(dg), Some(db)) = (g.gamma, g.beta) {
                        per_layer[i] = vec![dg, db];
                    }
                    g.input
                }
                _ => return Err(NetError::StaleCache),
            };
        }
        let input = with_input.then_some(grad);
        Ok(Gradients { params: per_layer.into_iter().flatten().collect(), input })
    }

    /// Per-example gradients of `log p(yᵢ | xᵢ)` with respect to the weight
    /// matrix of linear layer `layer`, one row per example, in training mode.
    ///
    /// For the linear layer feeding the softmax directly, the class-`C-1`
    /// row of the weight is dropped: the softmax is invariant to shifting
    /// all class rows together, so those coordinates are redundant.
    pub fn per_example_weight_grads(&self, x: &Matrix, labels: &[usize], layer: usize) -> Result<Matrix> {
        let (out, fan_in) = match self.layers.get(layer) {
            Some(Layer::Linear { weight, .. }) => weight.shape(),
            _ => return Err(NetError::Unsupported(format!("layer {layer} is not linear"))),
        };
        let (trace, _) = self.forward_pure(x, labels)?;
        let probs = trace.probs();
        let m = x.cols();
        let feeds_softmax = matches!(self.layers.get(layer + 1), Some(Layer::SoftmaxNll));
        if feeds_softmax {
            let h = trace.layer_input(layer).expect("linear cache");
            let rows = out - 1;
            let mut g = Matrix::zeros(m, rows * fan_in);
            for i in 0..m {
                let dst = g.row_mut(i);
                for c in 0..rows {
                    let coef = (labels[i] == c) as u8 as f64 - probs[(c, i)];
                    for k in 0..fan_in {
                        dst[c * fan_in + k] = coef * h[(k, i)];
                    }
                }
            }
            return Ok(g);
        }
        let weight_slot = self.param_slot_of(layer);
        let mut g = Matrix::zeros(m, out * fan_in);
        for i in 0..m {
            let mut dlogits = Matrix::zeros(probs.rows(), m);
            for c in 0..probs.rows() {
                dlogits[(c, i)] = (labels[i] == c) as u8 as f64 - probs[(c, i)];
            }
            let grads = self.backward_from_logits(&trace, dlogits.scale(-1.0), false)?;
            // Gradient of -log p was propagated; flip back to log p.
            for (dst, &v) in g.row_mut(i).iter_mut().zip(&grads.params[weight_slot]) {
                *dst = -v;
            }
        }
        Ok(g)
    }

    fn param_slot_of(&self, layer: usize) -> usize {
        self.layers[..layer]
            .iter()
            .map(|l| match l {
                Layer::Linear { .. } => 2,
                Layer::Trelu { .. } => 1,
                Layer::Norm(s) if s.gamma.is_some() => 2,
                _ => 0,
            })
            .sum()
    }
}
