//! Dense feed-forward softmax classifier with exact, hand-derived gradients.
//!
//! Hidden layers use a rectifier; the last layer produces logits that are
//! normalised with a softmax. Weights are stored `out × in`, so a batch of
//! row vectors `X` maps to `X·Wᵀ + b`.

mod checkpoint;
pub mod gradcheck;
mod loss;
mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{contract, shape, Error, Result};
use crate::rng;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use loss::{cross_entropy, mse_loss, soft_cross_entropy, LossKind, PerSampleLoss, PROB_FLOOR};
pub use optim::Sgd;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations kept from a batch forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[i]` is the input to layer `i` (post-activation of layer `i - 1`).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last entry holds the logits.
    pre: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("model has at least one layer")
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(factor, &b.weights);
            a.bias.scaled_add(factor, &b.bias);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// All entries in layer order, weights (row-major) before bias.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }
}

impl Mlp {
    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(shape(format!("layer {i} bias length mismatch")));
            }
            if l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFiniteLayer {
                    layer: i,
                    context: "parameter".into(),
                });
            }
        }
        if layers.last().unwrap().output_dim() < 2 {
            return Err(contract("classifier needs at least two classes"));
        }
        Ok(Mlp { layers })
    }

    /// Glorot-uniform initialisation, `dims = [input, hidden..., classes]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(contract(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = rng::stream(seed, rng::TAG_INIT);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp::from_layers(layers)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(contract(format!("invalid layer dims {dims:?}")));
        }
        Mlp::from_layers(dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_batch(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(current);
            current = if i < last { z.mapv(relu) } else { z.clone() };
            pre.push(z);
        }
        let probs = softmax_rows(current.view());
        Ok(ForwardCache { inputs, pre, probs })
    }

    /// Softmax probabilities for a batch of row vectors.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.probs)
    }

    /// Softmax probabilities for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| shape(e.to_string()))?;
        Ok(self.forward_batch(view)?.row(0).to_vec())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| shape(e.to_string()))?;
        Ok(self.forward_cached(view)?.logits().row(0).to_vec())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Backpropagates per-row logit gradients into parameter gradients.
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<f64>,
    ) -> Result<Gradients> {
        Ok(self.backprop(cache, dlogits, false)?.0)
    }

    /// Gradient of the summed loss with respect to each input row.
    pub fn input_gradients_from_logits(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.backprop(cache, dlogits, true)?.1.expect("requested"))
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<f64>,
        want_input: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        if dlogits.dim() != cache.probs.dim() {
            return Err(shape(format!(
                "logit gradient {:?} vs batch output {:?}",
                dlogits.dim(),
                cache.probs.dim()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dlogits.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            g.weights = delta.t().dot(&cache.inputs[i]);
            g.bias = delta.sum_axis(Axis(0));
            if g.weights
                .iter()
                .chain(g.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFiniteLayer {
                    layer: i,
                    context: "gradient".into(),
                });
            }
            if i > 0 || want_input {
                let mut upstream = delta.dot(&layer.weights);
                if i > 0 {
                    ndarray::Zip::from(&mut upstream)
                        .and(&cache.pre[i - 1])
                        .for_each(|d, &z| {
                            if z <= 0.0 {
                                *d = 0.0
                            }
                        });
                }
                delta = upstream;
            }
        }
        Ok((grads, want_input.then_some(delta)))
    }

    /// Exact gradient of the cross-entropy of `x` against class `label` with
    /// respect to the input features.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        if label >= self.class_count() {
            return Err(contract(format!("label {label} out of range")));
        }
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| shape(e.to_string()))?;
        let cache = self.forward_cached(view)?;
        let mut dlogits = cache.probs.clone();
        dlogits[[0, label]] -= 1.0;
        let g = self.input_gradients_from_logits(&cache, dlogits.view())?;
        Ok(g.row(0).to_vec())
    }
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous"));
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// First index of the maximum; ties resolve to the lowest class.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, class_count: usize) -> Vec<f64> {
    let mut v = vec![0.0; class_count];
    v[class] = 1.0;
    v
}

/// Mean weighted loss over a batch and its parameter gradients.
///
/// `targets` holds one probability vector per row (one-hot or soft, e.g. mixup
/// targets). The returned loss is `(1/n) Σ weights[i] · loss_i`.
pub fn backward(
    model: &Mlp,
    batch_x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    kind: LossKind,
    weights: &[f64],
) -> Result<(f64, Gradients)> {
    let n = batch_x.nrows();
    if n == 0 {
        return Err(contract("backward needs a nonempty batch"));
    }
    if targets.dim() != (n, model.class_count()) || weights.len() != n {
        return Err(shape(format!(
            "batch of {n} rows, targets {:?}, {} weights",
            targets.dim(),
            weights.len()
        )));
    }
    let cache = model.forward_cached(batch_x)?;
    let (loss, dlogits) = loss_and_logit_grad(cache.probs.view(), targets, kind, weights)?;
    let grads = model.backward_from_logits(&cache, dlogits.view())?;
    Ok((loss, grads))
}

/// Mean weighted loss and its gradient with respect to the logits.
pub fn loss_and_logit_grad(
    probs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    kind: LossKind,
    weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let n = probs.nrows() as f64;
    let mut total = 0.0;
    let mut dlogits = Array2::zeros(probs.dim());
    for (i, ((p, t), mut d)) in probs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(dlogits.rows_mut())
        .enumerate()
    {
        let scale = weights[i] / n;
        let p = p.as_slice().expect("contiguous");
        let t = t.to_vec();
        match kind {
            LossKind::CrossEntropy => {
                total += weights[i] * soft_cross_entropy(p, &t)?;
                // d/dz of -Σ t log softmax(z) is p·Σt − t.
                let mass: f64 = t.iter().sum();
                for c in 0..p.len() {
                    d[c] = scale * (p[c] * mass - t[c]);
                }
            }
            LossKind::Mse => {
                total += weights[i] * mse_loss(p, &t)?;
                let cc = p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / cc).collect();
                softmax_vjp(p, &dp, d.as_slice_mut().expect("contiguous"), scale);
            }
        }
    }
    Ok((total / n, dlogits))
}

/// Writes `scale · Jᵀ·dp` for the softmax Jacobian at `p` into `out`.
pub fn softmax_vjp(p: &[f64], dp: &[f64], out: &mut [f64], scale: f64) {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for c in 0..p.len() {
        out[c] = scale * p[c] * (dp[c] - inner);
    }
}
