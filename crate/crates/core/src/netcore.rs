//! Dense feed-forward stack with hand-derived reverse-mode gradients.
//!
//! The network is fixed-shape: a tanh backbone `g` that maps inputs to
//! features, then two linear heads reading those features: the projection
//! `r` into the reduced GMM space and the classifier `h`. Losses hand back
//! gradients with respect to the trace outputs ([`TraceGrad`]) and
//! [`backward`] pushes them through every layer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths of one network copy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    /// Widths of the tanh hidden layers inside `g`.
    pub hidden: Vec<usize>,
    /// Output width of `g` (linear last layer).
    pub feature_dim: usize,
    pub reduced_dim: usize,
    pub num_classes: usize,
}

impl Arch {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
        reduced_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        for (name, v) in [
            ("input_dim", input_dim),
            ("feature_dim", feature_dim),
            ("reduced_dim", reduced_dim),
            ("num_classes", num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        Ok(Arch {
            input_dim,
            hidden,
            feature_dim,
            reduced_dim,
            num_classes,
        })
    }

    /// Number of layers making up the backbone `g`.
    pub fn backbone_len(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn projection_index(&self) -> usize {
        self.backbone_len()
    }

    pub fn classifier_index(&self) -> usize {
        self.backbone_len() + 1
    }

    /// `(out, in)` for every layer, in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 3);
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            shapes.push((w, prev));
            prev = w;
        }
        shapes.push((self.feature_dim, prev));
        shapes.push((self.reduced_dim, self.feature_dim));
        shapes.push((self.num_classes, self.feature_dim));
        shapes
    }
}

/// One affine map `y = W x + b`, with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }

    /// Row-wise affine map of a batch (`N × in` -> `N × out`).
    pub fn apply(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = input * self.weight.transpose();
        for (j, b) in self.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }
}

/// Weights of one network copy (student, teacher or frozen source).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    arch: Arch,
    layers: Vec<Layer>,
}

/// Gradients with exactly the layout of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros(arch: &Arch) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Layer::zeros(o, i))
            .collect();
        ParamSet {
            arch: arch.clone(),
            layers,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> Self {
        let mut p = ParamSet::zeros(arch);
        for layer in &mut p.layers {
            let (o, i) = layer.weight.shape();
            let bound = (6.0 / (o + i) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Builds a parameter set from explicit layers, checking them against `arch`.
    pub fn from_layers(arch: &Arch, layers: Vec<Layer>) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::dim("ParamSet layers", shapes.len(), layers.len()));
        }
        for ((o, i), l) in shapes.iter().zip(&layers) {
            if l.weight.shape() != (*o, *i) || l.bias.len() != *o {
                return Err(Error::dim(
                    "ParamSet layer shape",
                    format!("{o}x{i}"),
                    format!("{}x{}", l.weight.nrows(), l.weight.ncols()),
                ));
            }
        }
        Ok(ParamSet {
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

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn projection(&self) -> &Layer {
        &self.layers[self.arch.projection_index()]
    }

    pub fn classifier(&self) -> &Layer {
        &self.layers[self.arch.classifier_index()]
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Every scalar, layer by layer (weights then bias).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Largest elementwise absolute difference to another parameter set.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn value_mut(&mut self, flat: usize) -> &mut f64 {
        let mut idx = flat;
        for l in &mut self.layers {
            if idx < l.weight.len() {
                return &mut l.weight.as_mut_slice()[idx];
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return &mut l.bias.as_mut_slice()[idx];
            }
            idx -= l.bias.len();
        }
        panic!("flat parameter index {flat} out of range");
    }
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.zip_apply(&b.weight, |x, y| *x += scale * y);
            a.bias.zip_apply(&b.bias, |x, y| *x += scale * y);
        }
    }

    fn matches(&self, params: &ParamSet) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(a, b)| a.same_shape(b))
    }
}

/// Everything one forward pass produces, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: DMatrix<f64>,
    /// tanh activations of each hidden layer.
    pub hidden: Vec<DMatrix<f64>>,
    pub features: DMatrix<f64>,
    pub reduced: DMatrix<f64>,
    pub logits: DMatrix<f64>,
    pub probs: DMatrix<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }
}

/// Loss gradients with respect to the outputs recorded in a [`ForwardTrace`].
#[derive(Debug, Clone)]
pub struct TraceGrad {
    pub features: DMatrix<f64>,
    pub reduced: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

impl TraceGrad {
    pub fn zeros_like(trace: &ForwardTrace) -> Self {
        TraceGrad {
            features: DMatrix::zeros(trace.features.nrows(), trace.features.ncols()),
            reduced: DMatrix::zeros(trace.reduced.nrows(), trace.reduced.ncols()),
            logits: DMatrix::zeros(trace.logits.nrows(), trace.logits.ncols()),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of an `N × C` matrix.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for i in 0..logits.nrows() {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        for (j, p) in softmax(&row).into_iter().enumerate() {
            out[(i, j)] = p;
        }
    }
    out
}

/// Runs the backbone only, returning `(hidden activations, features)`.
fn backbone(params: &ParamSet, batch: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let n_hidden = params.arch.hidden.len();
    let mut hidden = Vec::with_capacity(n_hidden);
    for l in 0..n_hidden {
        let input = if l == 0 { batch } else { &hidden[l - 1] };
        let z = params.layers[l].apply(input).map(f64::tanh);
        hidden.push(z);
    }
    let last = hidden.last().unwrap_or(batch);
    let features = params.layers[n_hidden].apply(last);
    (hidden, features)
}

fn check_input(params: &ParamSet, batch: &DMatrix<f64>) -> Result<()> {
    if batch.ncols() != params.arch.input_dim {
        return Err(Error::dim(
            "forward input columns",
            params.arch.input_dim,
            batch.ncols(),
        ));
    }
    Ok(())
}

pub fn forward(params: &ParamSet, batch: &DMatrix<f64>) -> Result<ForwardTrace> {
    check_input(params, batch)?;
    let (hidden, features) = backbone(params, batch);
    let reduced = params.projection().apply(&features);
    let logits = params.classifier().apply(&features);
    let probs = softmax_rows(&logits);
    Ok(ForwardTrace {
        inputs: batch.clone(),
        hidden,
        features,
        reduced,
        logits,
        probs,
    })
}

/// Output of `g` alone.
pub fn features(params: &ParamSet, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_input(params, batch)?;
    Ok(backbone(params, batch).1)
}

/// Reverse pass: gradients of a scalar loss for every trainable array,
/// given the loss gradients with respect to the trace outputs.
pub fn backward(params: &ParamSet, trace: &ForwardTrace, grad: &TraceGrad) -> Result<Gradients> {
    let n = trace.batch_size();
    for (name, m, expect) in [
        ("features", &grad.features, &trace.features),
        ("reduced", &grad.reduced, &trace.reduced),
        ("logits", &grad.logits, &trace.logits),
    ] {
        if m.shape() != expect.shape() {
            return Err(Error::Contract(format!(
                "trace gradient `{name}` has shape {:?}, trace has {:?}",
                m.shape(),
                expect.shape()
            )));
        }
    }
    let arch = &params.arch;
    let mut out = Gradients::zeros_like(params);

    let proj = arch.projection_index();
    let cls = arch.classifier_index();
    out.layers[proj].weight = grad.reduced.transpose() * &trace.features;
    out.layers[proj].bias = grad.reduced.row_sum_tr();
    out.layers[cls].weight = grad.logits.transpose() * &trace.features;
    out.layers[cls].bias = grad.logits.row_sum_tr();

    let mut delta = grad.features.clone();
    delta += &grad.reduced * &params.layers[proj].weight;
    delta += &grad.logits * &params.layers[cls].weight;

    for l in (0..arch.backbone_len()).rev() {
        let input = if l == 0 {
            &trace.inputs
        } else {
            &trace.hidden[l - 1]
        };
        out.layers[l].weight = delta.transpose() * input;
        out.layers[l].bias = delta.row_sum_tr();
        if l > 0 {
            let mut d_in = &delta * &params.layers[l].weight;
            let act = &trace.hidden[l - 1];
            for i in 0..n {
                for j in 0..d_in.ncols() {
                    let a = act[(i, j)];
                    d_in[(i, j)] *= 1.0 - a * a;
                }
            }
            delta = d_in;
        }
    }
    Ok(out)
}

/// Heavy-ball momentum buffers plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            velocity: Gradients::zeros_like(params),
            learning_rate,
            momentum,
        }
    }
}

/// `v <- momentum * v + grad; theta <- theta - lr * v`.
///
/// Nothing is touched when the gradients contain NaN/Inf.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if !grads.matches(params) || !opt.velocity.matches(params) {
        return Err(Error::dim(
            "sgd_step",
            "gradient/velocity shapes equal to params",
            "mismatch",
        ));
    }
    if !grads.is_finite() {
        return Err(Error::numerical("sgd_step", "non-finite gradient"));
    }
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for ((p, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(opt.velocity.layers.iter_mut())
    {
        v.weight *= mu;
        v.weight += &g.weight;
        v.bias *= mu;
        v.bias += &g.bias;
        p.weight.zip_apply(&v.weight, |x, y| *x -= lr * y);
        p.bias.zip_apply(&v.bias, |x, y| *x -= lr * y);
    }
    if !params.is_finite() {
        return Err(Error::numerical("sgd_step", "parameters became non-finite"));
    }
    Ok(())
}

/// Compares analytic gradients with central differences on up to
/// `max_coords` evenly spread coordinates and returns the worst relative
/// error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet, eps: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let (_, analytic) = loss_fn(params)?;
    let analytic: Vec<f64> = analytic.values().collect();
    let total = params.num_values();
    let stride = total.div_ceil(max_coords.max(1)).max(1);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in (0..total).step_by(stride) {
        let orig = *probe.value_mut(idx);
        *probe.value_mut(idx) = orig + eps;
        let plus = loss_fn(&probe)?.0;
        *probe.value_mut(idx) = orig - eps;
        let minus = loss_fn(&probe)?.0;
        *probe.value_mut(idx) = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
