//! Dense feed-forward networks with a hand-derived backward pass.
//!
//! Layers compute `a_out = act(a_in · W + b)` with `W` stored as a
//! `fan_in × fan_out` matrix. Hidden layers use ReLU and the last layer is
//! always the identity, so the network emits raw logits and softmax happens
//! inside the loss.
//!
//! The flat-parameter view visits layers in order and, within a layer, the
//! weight matrix in row-major order followed by the bias vector. Every
//! penalty, Fisher estimate, index map and checkpoint uses this layout.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RecError, Result};

/// Rows per chunk for inference over whole datasets.
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Layer structure of a dense network: input width, hidden widths, classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    input_dim: usize,
    hidden_widths: Vec<usize>,
    output_dim: usize,
}

impl Arch {
    /// Builds an architecture with at least one hidden layer.
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        if hidden_widths.is_empty() {
            return Err(RecError::InvalidArch(
                "at least one hidden layer is required; use Arch::linear for a direct map".into(),
            ));
        }
        Self::build(input_dim, hidden_widths, output_dim)
    }

    /// Direct input→output map with no hidden layer.
    pub fn linear(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::build(input_dim, Vec::new(), output_dim)
    }

    /// Inverse of [`Arch::dims`]; an empty hidden list is accepted.
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(RecError::InvalidArch(format!(
                "need at least input and output dims, got {}",
                dims.len()
            )));
        }
        Self::build(
            dims[0],
            dims[1..dims.len() - 1].to_vec(),
            dims[dims.len() - 1],
        )
    }

    fn build(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_widths.iter().any(|&w| w == 0) {
            return Err(RecError::InvalidArch(format!(
                "all widths must be positive: {input_dim} {hidden_widths:?} {output_dim}"
            )));
        }
        Ok(Arch {
            input_dim,
            hidden_widths,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden_widths
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims().windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    pub(crate) fn with_hidden(&self, hidden_widths: Vec<usize>) -> Result<Self> {
        Self::build(self.input_dim, hidden_widths, self.output_dim)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let dims: Vec<String> = self.dims().iter().map(ToString::to_string).collect();
        f.write_str(&dims.join("-"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) weights: Array2<f64>,
    pub(crate) bias: Array1<f64>,
    pub(crate) activation: Activation,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(RecError::shape("layer bias", weights.ncols(), bias.len()));
        }
        Ok(Layer {
            weights,
            bias,
            activation,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    arch: Arch,
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Assembles a network from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(RecError::InvalidArch("network needs at least one layer".into()));
        };
        let mut dims = vec![first.fan_in()];
        for (l, layer) in layers.iter().enumerate() {
            if layer.fan_in() != dims[l] {
                return Err(RecError::shape("layer chain", dims[l], layer.fan_in()));
            }
            dims.push(layer.fan_out());
        }
        let arch = Arch::from_dims(&dims)?;
        Ok(DenseNet { arch, layers })
    }

    /// Rebuilds a network from its flat-parameter view.
    pub fn from_flat(arch: &Arch, params: &[f64]) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(RecError::shape("flat parameters", arch.param_count(), params.len()));
        }
        let shapes = arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut layers = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &params[offset..offset + fan_out];
            offset += fan_out;
            layers.push(Layer {
                weights: Array2::from_shape_vec((fan_in, fan_out), w.to_vec())
                    .expect("slice length matches shape"),
                bias: Array1::from(b.to_vec()),
                activation: if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            });
        }
        Ok(DenseNet {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Start offset of each layer in the flat view.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.param_count();
        }
        offsets
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Overwrites all parameters from a flat view of matching length.
    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(RecError::shape("flat parameters", self.param_count(), params.len()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// He-normal weights (variance `2 / fan_in`) and zero biases.
pub fn init_network(arch: &Arch, seed: u64) -> DenseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = arch.layer_shapes();
    let last = shapes.len() - 1;
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(l, &(fan_in, fan_out))| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Layer {
                weights: Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(&mut rng)),
                bias: Array1::zeros(fan_out),
                activation: if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            }
        })
        .collect();
    DenseNet {
        arch: arch.clone(),
        layers,
    }
}

/// Block of output columns a task reads its logits from.
///
/// Shared-head tasks use the whole output layer; split tasks each own a
/// contiguous slice of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub offset: usize,
    pub classes: usize,
}

impl Head {
    pub fn full(classes: usize) -> Self {
        Head { offset: 0, classes }
    }

    pub fn end(&self) -> usize {
        self.offset + self.classes
    }
}

/// Labeled samples. Labels are local to the dataset's [`Head`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    head: Head,
}

/// A minibatch is just a small dataset.
pub type Batch = Dataset;

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::with_head(inputs, labels, Head::full(classes))
    }

    pub fn with_head(inputs: Array2<f64>, labels: Vec<usize>, head: Head) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(RecError::shape("dataset labels", inputs.nrows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(RecError::EmptyDataset("dataset has no samples"));
        }
        if head.classes == 0 {
            return Err(RecError::InvalidArch("head with zero classes".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= head.classes) {
            return Err(RecError::LabelOutOfRange {
                label,
                classes: head.classes,
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            head,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::with_head(inputs, labels, self.head)
    }

    /// Same samples with inputs replaced row-for-row.
    pub fn map_inputs(&self, inputs: Array2<f64>) -> Result<Dataset> {
        Dataset::with_head(inputs, self.labels.clone(), self.head)
    }

    pub fn relabel_head(&self, head: Head) -> Result<Dataset> {
        Dataset::with_head(self.inputs.clone(), self.labels.clone(), head)
    }
}

/// Pre- and post-activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn activations(&self) -> &[Array2<f64>] {
        &self.activations
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

fn check_input(net: &DenseNet, inputs: &ArrayView2<f64>) -> Result<()> {
    if inputs.ncols() != net.arch.input_dim {
        return Err(RecError::shape("forward input", net.arch.input_dim, inputs.ncols()));
    }
    Ok(())
}

fn affine(layer: &Layer, a: &ArrayView2<f64>) -> Array2<f64> {
    let mut z = a.dot(&layer.weights);
    z += &layer.bias;
    z
}

pub fn forward(net: &DenseNet, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    check_input(net, &inputs)?;
    let mut activations = Vec::with_capacity(net.layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(net.layers.len());
    activations.push(inputs.to_owned());
    for layer in &net.layers {
        let z = affine(layer, &activations.last().expect("nonempty").view());
        let a = z.mapv(|x| layer.activation.apply(x));
        pre_activations.push(z);
        activations.push(a);
    }
    let logits = activations.last().expect("nonempty").clone();
    Ok((
        logits,
        ForwardCache {
            activations,
            pre_activations,
        },
    ))
}

/// Logits for every row, without keeping a cache.
pub fn predict_logits(net: &DenseNet, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(net, &inputs)?;
    let mut out = Array2::zeros((inputs.nrows(), net.arch.output_dim));
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + PREDICT_CHUNK).min(inputs.nrows());
        let mut a = inputs.slice(s![start..end, ..]).to_owned();
        for layer in &net.layers {
            a = affine(layer, &a.view());
            a.mapv_inplace(|x| layer.activation.apply(x));
        }
        out.slice_mut(s![start..end, ..]).assign(&a);
        start = end;
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn loss_ce(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n != labels.len() {
        return Err(RecError::shape("cross-entropy labels", n, labels.len()));
    }
    if n == 0 {
        return Err(RecError::EmptyDataset("cross-entropy on empty batch"));
    }
    let k = logits.ncols();
    let mut dlogits = Array2::zeros((n, k));
    let mut total = 0.0;
    for (i, (row, &label)) in logits.outer_iter().zip(labels).enumerate() {
        if label >= k {
            return Err(RecError::LabelOutOfRange { label, classes: k });
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_sum = sum.ln();
        total += -(row[label] - max - log_sum);
        for (j, &x) in row.iter().enumerate() {
            dlogits[[i, j]] = (x - max).exp() / sum / n as f64;
        }
        dlogits[[i, label]] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, dlogits))
}

/// Cross-entropy restricted to a head's logit columns. The returned gradient
/// covers all output columns and is zero outside the head.
pub fn head_loss_ce(logits: &Array2<f64>, labels: &[usize], head: Head) -> Result<(f64, Array2<f64>)> {
    if head.end() > logits.ncols() {
        return Err(RecError::shape("head columns", logits.ncols(), head.end()));
    }
    let (value, dhead) = loss_ce(logits.slice(s![.., head.offset..head.end()]), labels)?;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    dlogits
        .slice_mut(s![.., head.offset..head.end()])
        .assign(&dhead);
    Ok((value, dlogits))
}

/// Gradients of the loss with respect to each layer's pre-activation.
pub(crate) fn backward_deltas(
    net: &DenseNet,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    if cache.pre_activations.len() != net.layers.len() {
        return Err(RecError::shape(
            "forward cache depth",
            net.layers.len(),
            cache.pre_activations.len(),
        ));
    }
    for (layer, z) in net.layers.iter().zip(&cache.pre_activations) {
        if z.ncols() != layer.fan_out() {
            return Err(RecError::shape("forward cache width", layer.fan_out(), z.ncols()));
        }
    }
    if dlogits.dim() != cache.pre_activations.last().expect("nonempty").dim() {
        return Err(RecError::shape(
            "dlogits rows",
            cache.batch_size(),
            dlogits.nrows(),
        ));
    }
    let depth = net.layers.len();
    let mut deltas = vec![Array2::zeros((0, 0)); depth];
    let mut delta = dlogits.clone();
    for l in (0..depth).rev() {
        if net.layers[l].activation == Activation::Relu {
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre_activations[l])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
        let upstream = if l > 0 {
            Some(delta.dot(&net.layers[l].weights.t()))
        } else {
            None
        };
        deltas[l] = delta;
        if let Some(up) = upstream {
            delta = up;
        } else {
            break;
        }
    }
    Ok(deltas)
}

/// Exact gradient of the loss behind `dlogits`, in flat-view order.
pub fn backward(net: &DenseNet, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<Vec<f64>> {
    let deltas = backward_deltas(net, cache, dlogits)?;
    let mut grads = Vec::with_capacity(net.param_count());
    for (l, delta) in deltas.iter().enumerate() {
        let gw = cache.activations[l].t().dot(delta);
        grads.extend(gw.iter().copied());
        grads.extend(delta.sum_axis(Axis(0)).iter().copied());
    }
    Ok(grads)
}

/// Plain SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + g; θ ← θ − lr·v`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &[f64]) -> Result<()> {
        if grads.len() != net.param_count() {
            return Err(RecError::shape("gradient length", net.param_count(), grads.len()));
        }
        if self.velocity.len() != grads.len() {
            self.velocity = vec![0.0; grads.len()];
        }
        for (v, &g) in self.velocity.iter_mut().zip(grads) {
            *v = self.momentum * *v + g;
        }
        let mut offset = 0;
        let lr = self.lr;
        for layer in net.layers_mut() {
            for w in layer.weights.iter_mut() {
                *w -= lr * self.velocity[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b -= lr * self.velocity[offset];
                offset += 1;
            }
        }
        Ok(())
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, x) in row.into_iter().enumerate() {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

/// Number of samples whose argmax over the dataset's head equals the label.
pub fn count_correct(net: &DenseNet, dataset: &Dataset) -> Result<usize> {
    let logits = predict_logits(net, dataset.inputs().view())?;
    let head = dataset.head();
    if head.end() > logits.ncols() {
        return Err(RecError::shape("head columns", logits.ncols(), head.end()));
    }
    Ok(logits
        .slice(s![.., head.offset..head.end()])
        .outer_iter()
        .zip(dataset.labels())
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count())
}

pub fn evaluate(net: &DenseNet, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(RecError::EmptyDataset("evaluate"));
    }
    Ok(count_correct(net, dataset)? as f64 / dataset.len() as f64)
}

/// Pooled accuracy over several datasets, weighted by sample count.
pub fn evaluate_many(net: &DenseNet, datasets: &[&Dataset]) -> Result<f64> {
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(RecError::EmptyDataset("evaluate_many"));
    }
    let mut correct = 0;
    for d in datasets {
        correct += count_correct(net, d)?;
    }
    Ok(correct as f64 / total as f64)
}
