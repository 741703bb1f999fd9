//! Feed-forward classifier: forward pass, analytic backpropagation and
//! momentum SGD with a stepped learning-rate schedule.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`, so each layer
//! computes `z = W a + b` followed by its activation. The last layer is always
//! an identity layer producing raw logits.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    #[default]
    GlorotUniform,
    Zeros,
}

/// Layer widths from input to logits, plus one activation per layer.
///
/// An empty `activations` list means relu on every hidden layer and identity
/// on the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub activations: Vec<Activation>,
}

impl ModelSpec {
    /// Relu hidden layers of the given widths and an identity output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        Self {
            dims,
            activations: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    /// Same hidden layers with a different output width.
    pub fn with_classes(&self, num_classes: usize) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.dims.last_mut() {
            *last = num_classes;
        }
        out
    }

    pub fn resolved_activations(&self) -> Vec<Activation> {
        if self.activations.is_empty() {
            let n = self.num_layers();
            (0..n)
                .map(|i| {
                    if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    }
                })
                .collect()
        } else {
            self.activations.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Dimension(
                "a model needs at least an input and an output dimension".into(),
            ));
        }
        if let Some(i) = self.dims.iter().position(|&d| d == 0) {
            return Err(Error::Dimension(format!("layer dimension {i} is zero")));
        }
        if self.num_classes() < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 classes, got {}",
                self.num_classes()
            )));
        }
        if !self.activations.is_empty() {
            if self.activations.len() != self.num_layers() {
                return Err(Error::Dimension(format!(
                    "{} activations for {} layers",
                    self.activations.len(),
                    self.num_layers()
                )));
            }
            if self.activations.last() != Some(&Activation::Identity) {
                return Err(Error::Config(
                    "the output layer must use the identity activation".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of trainable parameters.
    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::init_with(spec, seed, WeightInit::GlorotUniform)
    }

    pub fn init_with(spec: &ModelSpec, seed: u64, init: WeightInit) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed, seed::STREAM_INIT);
        let layers = spec
            .dims
            .windows(2)
            .zip(spec.resolved_activations())
            .map(|(w, activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut weights = Matrix::zeros(fan_out, fan_in);
                if init == WeightInit::GlorotUniform {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    for v in weights.as_mut_slice() {
                        *v = dist.sample(&mut rng);
                    }
                }
                Layer {
                    weights,
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model has no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i}: bias length {} != output dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::Dimension(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        layer.out_dim(),
                        i + 1,
                        next.in_dim()
                    )));
                }
            }
        }
        let last = layers.last().expect("nonempty");
        if last.activation != Activation::Identity {
            return Err(Error::Config(
                "the output layer must use the identity activation".into(),
            ));
        }
        if last.out_dim() < 2 {
            return Err(Error::Dimension("need at least 2 classes".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn spec(&self) -> ModelSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        ModelSpec {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Runs the network and keeps everything backpropagation needs.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers {
            let input = activations.last().expect("input pushed");
            let mut z = layer.weights.mul_vec(input);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            pre_activations,
            activations,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.into_logits())
    }

    /// Logits for the selected rows of a feature matrix, one row per sample.
    pub fn logits_for_rows(&self, features: &Matrix, rows: &[usize]) -> Result<Matrix> {
        let k = self.num_classes();
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            data.extend(self.logits(features.row(r))?);
        }
        Matrix::from_vec(rows.len(), k, data)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Exact gradients of the scalar loss whose logit gradient is `grad_logits`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, grad_logits, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale` times the gradients for one sample into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        if cache.pre_activations.len() != self.layers.len()
            || cache
                .pre_activations
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.len() != l.out_dim())
        {
            return Err(Error::Dimension(
                "forward cache does not match the model".into(),
            ));
        }
        if grad_logits.len() != self.num_classes() {
            return Err(Error::Dimension(format!(
                "logit gradient has length {}, model has {} classes",
                grad_logits.len(),
                self.num_classes()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension("gradient set does not match model".into()));
        }

        let mut upstream: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[l];
            let input = &cache.activations[l];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(z)
                .map(|(g, &zi)| g * layer.activation.derivative(zi))
                .collect();
            let lg = &mut grads.layers[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                lg.bias[r] += d;
                for (w, &a) in lg.weights.row_mut(r).iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            if l > 0 {
                upstream = layer.weights.mul_vec_transposed(&delta);
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Per-layer values recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `z` of every layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Layer inputs: the sample itself followed by every layer's output.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }

    pub fn into_logits(mut self) -> Vec<f64> {
        self.activations.pop().expect("at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter-shaped buffers, used both for gradients and for momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

pub type Velocity = Gradients;

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// All values in a fixed order: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    fn matches(&self, model: &Mlp) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.weights.rows() == l.out_dim()
                    && g.weights.cols() == l.in_dim()
                    && g.bias.len() == l.out_dim()
            })
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax`, computed via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(-log_softmax(logits)[label])
}

/// Cross-entropy and its gradient with respect to the logits, `softmax - onehot`.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, label)?;
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub weight_init: WeightInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            seed: 0,
            weight_init: WeightInit::GlorotUniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_optimizer()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn validate_optimizer(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(steps)
    }
}

/// One momentum step: `v <- mu v - lr_t g`, `w <- w + v`.
pub fn sgd_step(
    model: &mut Mlp,
    grads: &Gradients,
    velocity: &mut Velocity,
    config: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    if !grads.matches(model) || !velocity.matches(model) {
        return Err(Error::Dimension(
            "gradient or velocity shape does not match the model".into(),
        ));
    }
    let lr = config.learning_rate_at(epoch);
    let mu = config.momentum;
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        let params = layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .chain(layer.bias.iter_mut());
        let gs = g.weights.as_slice().iter().chain(&g.bias);
        let vs = v.weights.as_mut_slice().iter_mut().chain(v.bias.iter_mut());
        for ((w, &gi), vi) in params.zip(gs).zip(vs) {
            *vi = mu * *vi - lr * gi;
            *w += *vi;
        }
    }
    Ok(())
}

/// Training samples: rows of a shared feature matrix with their labels.
///
/// `labels[j]` belongs to `features.row(rows[j])`; objectives receive the
/// position `j`, which is how per-sample caches are looked up.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub features: &'a Matrix,
    pub rows: &'a [usize],
    pub labels: &'a [usize],
}

impl<'a> TrainSet<'a> {
    pub fn new(features: &'a Matrix, rows: &'a [usize], labels: &'a [usize]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= features.rows()) {
            return Err(Error::Dimension(format!(
                "row {r} outside feature matrix with {} rows",
                features.rows()
            )));
        }
        Ok(Self {
            features,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sample(&self, position: usize) -> (&'a [f64], usize) {
        (self.features.row(self.rows[position]), self.labels[position])
    }
}

/// Per-sample training loss. Training averages it over each mini-batch.
pub trait Objective: Sync {
    /// Loss and gradient with respect to `logits` for the sample at `position`.
    fn loss(&self, position: usize, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)>;
}

/// Plain cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn loss(&self, _position: usize, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        cross_entropy_with_grad(logits, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    /// Error of the in-epoch predictions, made before each batch update.
    pub train_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

pub fn train(
    model: &mut Mlp,
    data: TrainSet<'_>,
    objective: &dyn Objective,
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, data, objective, config, |_, _| Ok(()))
}

/// Mini-batch momentum SGD. `on_epoch` runs after every epoch with the
/// 1-based epoch number and the current model.
pub fn train_with<F>(
    model: &mut Mlp,
    data: TrainSet<'_>,
    objective: &dyn Objective,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &Mlp) -> Result<()>,
{
    config.validate_optimizer()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if data.features.cols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "features have {} columns, model expects {}",
            data.features.cols(),
            model.input_dim()
        )));
    }
    let classes = model.num_classes();
    if let Some(&label) = data.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }

    let mut log = TrainLog::default();
    let mut velocity = Gradients::zeros_like(model);
    let mut grads = Gradients::zeros_like(model);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::epoch_rng(config.seed, epoch));

        let mut loss_sum = 0.0;
        let mut errors = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &pos in batch {
                let (x, y) = data.sample(pos);
                let cache = model.forward(x)?;
                let (loss, grad) = objective.loss(pos, cache.logits(), y)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged in epoch {}",
                        epoch + 1
                    )));
                }
                loss_sum += loss;
                if argmax(cache.logits()) != y {
                    errors += 1;
                }
                model.backward_into(&cache, &grad, scale, &mut grads)?;
            }
            sgd_step(model, &grads, &mut velocity, config, epoch)?;
        }
        if !model.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged in epoch {}",
                epoch + 1
            )));
        }
        log.epochs.push(EpochStats {
            epoch: epoch + 1,
            learning_rate: config.learning_rate_at(epoch),
            mean_loss: loss_sum / data.len() as f64,
            train_error: errors as f64 / data.len() as f64,
        });
        on_epoch(epoch + 1, model)?;
    }
    Ok(log)
}

/// Fraction of `rows` whose prediction differs from the label.
pub fn error_rate(model: &Mlp, features: &Matrix, rows: &[usize], labels: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut wrong = 0usize;
    for (&r, &y) in rows.iter().zip(labels) {
        if model.predict(features.row(r))? != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / rows.len() as f64)
}
