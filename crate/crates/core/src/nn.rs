//! A small feedforward network engine: affine layers with LeakyReLU, sigmoid
//! or identity activations, batched forward/backward passes written out by
//! hand, and plain SGD.
//!
//! Batches are row-major: one sample per row. A layer maps `x` to
//! `act(x · Wᵀ + b)` with `W` stored as `out × in`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Sigmoid outputs are kept this far away from 0 and 1.
pub const SIGMOID_MARGIN: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Identity,
}

/// Logistic function, evaluated without overflow and clamped into the open
/// unit interval.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}

/// `log σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `log(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    leaky_slope: f64,
}

/// Per-layer activations of a batched forward pass. `acts[0]` is the input,
/// `acts[k + 1]` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }
}

/// Accumulated parameter gradients, laid out like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientTape {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && net
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| w.dim() == l.weights.dim() && b.len() == l.bias.len())
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>, leaky_slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        if !(leaky_slope.is_finite() && leaky_slope > 0.0) {
            return Err(Error::Config(format!(
                "leaky slope must be positive and finite, got {leaky_slope}"
            )));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} != output dim {}",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(Error::Shape(format!("layer {k} has a zero dimension")));
            }
            if !layer.weights.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Input(format!("layer {k} has non-finite parameters")));
            }
            if k > 0 && layers[k - 1].output_dim() != layer.input_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} values but layer {k} expects {}",
                    k - 1,
                    layers[k - 1].output_dim(),
                    layer.input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            leaky_slope,
        })
    }

    /// Uniform fan-based initialization in `±sqrt(6 / (fan_in + fan_out))`,
    /// zero biases. `dims` lists the input width followed by each layer width.
    pub fn initialize(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        leaky_slope: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need an input and at least one layer".into()));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if k + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self::new(layers, leaky_slope)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn activate(&self, z: &mut Array2<f64>, activation: Activation) {
        match activation {
            Activation::LeakyRelu => {
                let slope = self.leaky_slope;
                z.mapv_inplace(|v| if v < 0.0 { slope * v } else { v });
            }
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Identity => {}
        }
    }

    fn affine(&self, layer: &Layer, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((x.nrows(), layer.output_dim()));
        general_mat_mul(1.0, x, &layer.weights.t(), 0.0, &mut z);
        z += &layer.bias;
        z
    }

    fn check_batch(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Batched forward pass without keeping intermediate activations.
    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&input)?;
        let mut x = self.affine(&self.layers[0], &input);
        self.activate(&mut x, self.layers[0].activation);
        for layer in &self.layers[1..] {
            let mut z = self.affine(layer, &x.view());
            self.activate(&mut z, layer.activation);
            x = z;
        }
        Ok(x)
    }

    /// Continue a forward pass from the pre-activation of the first layer.
    /// Lets callers assemble the first affine map from precomputed parts.
    pub fn predict_from_first_preactivation(&self, mut z: Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.layers[0].output_dim() {
            return Err(Error::Shape(format!(
                "pre-activation has {} columns, first layer outputs {}",
                z.ncols(),
                self.layers[0].output_dim()
            )));
        }
        self.activate(&mut z, self.layers[0].activation);
        let mut x = z;
        for layer in &self.layers[1..] {
            let mut z = self.affine(layer, &x.view());
            self.activate(&mut z, layer.activation);
            x = z;
        }
        Ok(x)
    }

    /// Batched forward pass that records every activation for `backward_batch`.
    pub fn forward_batch(&self, input: Array2<f64>) -> Result<ForwardCache> {
        self.check_batch(&input.view())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for layer in &self.layers {
            let mut z = self.affine(layer, &acts.last().unwrap().view());
            self.activate(&mut z, layer.activation);
            acts.push(z);
        }
        Ok(ForwardCache { acts })
    }

    /// Backpropagate `upstream` (∂loss/∂output, one row per sample) through the
    /// cached pass. Parameter gradients are added to `tape`; the gradient with
    /// respect to the batch input is returned.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: Array2<f64>,
        tape: &mut GradientTape,
    ) -> Result<Array2<f64>> {
        if !tape.matches(self) {
            return Err(Error::Shape("gradient tape does not match network".into()));
        }
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::Shape("forward cache does not match network".into()));
        }
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        if !upstream.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite upstream gradient".into()));
        }
        let mut grad = upstream;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let act = &cache.acts[k + 1];
            match layer.activation {
                Activation::LeakyRelu => {
                    let slope = self.leaky_slope;
                    Zip::from(&mut grad).and(act).for_each(|g, &a| {
                        if a < 0.0 {
                            *g *= slope;
                        }
                    });
                }
                Activation::Sigmoid => {
                    Zip::from(&mut grad)
                        .and(act)
                        .for_each(|g, &a| *g *= a * (1.0 - a));
                }
                Activation::Identity => {}
            }
            general_mat_mul(1.0, &grad.t(), &cache.acts[k], 1.0, &mut tape.weights[k]);
            tape.biases[k] += &grad.sum_axis(Axis(0));
            let mut next = Array2::zeros((grad.nrows(), layer.input_dim()));
            general_mat_mul(1.0, &grad, &layer.weights, 0.0, &mut next);
            grad = next;
        }
        Ok(grad)
    }

    /// Single-sample backward pass: runs the forward pass for `input` and
    /// returns the parameter gradients for the given output gradient.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<GradientTape> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} != network input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream length {} != network output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let cache = self.forward_batch(x)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut tape = GradientTape::zeros_like(self);
        self.backward_batch(&cache, up, &mut tape)?;
        Ok(tape)
    }

    /// `θ ← θ − lr · ∂θ` for every parameter.
    pub fn sgd_step(&mut self, tape: &GradientTape, learning_rate: f64) -> Result<()> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !tape.matches(self) {
            return Err(Error::Shape("gradient tape does not match network".into()));
        }
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(tape.weights.iter().zip(&tape.biases))
        {
            layer.weights.scaled_add(-learning_rate, gw);
            layer.bias.scaled_add(-learning_rate, gb);
        }
        Ok(())
    }

    /// Parameters flattened layer by layer, weights (row-major) then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            l.weights.iter_mut().zip(w).for_each(|(d, s)| *d = *s);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
            rest = tail;
        }
        Ok(())
    }

    pub fn to_document(&self, seed: Option<u64>) -> NetDocument {
        NetDocument {
            format_version: NET_FORMAT_VERSION,
            seed,
            leaky_slope: self.leaky_slope,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    input_dim: l.input_dim(),
                    output_dim: l.output_dim(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &NetDocument) -> Result<Self> {
        if doc.format_version != NET_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported network format version {}",
                doc.format_version
            )));
        }
        let layers = doc
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let expected = l.input_dim.checked_mul(l.output_dim).ok_or_else(|| {
                    Error::Shape(format!("layer {k}: dimensions overflow"))
                })?;
                if l.weights.len() != expected {
                    return Err(Error::Shape(format!(
                        "layer {k}: {} weights for a {}x{} layer",
                        l.weights.len(),
                        l.output_dim,
                        l.input_dim
                    )));
                }
                let weights = Array2::from_shape_vec((l.output_dim, l.input_dim), l.weights.clone())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(Layer {
                    weights,
                    bias: Array1::from(l.bias.clone()),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, doc.leaky_slope)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// Self-describing JSON form of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDocument {
    pub format_version: u32,
    pub seed: Option<u64>,
    pub leaky_slope: f64,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// Row-major `output_dim × input_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Finite-difference helpers for checking hand-written gradients.
/// Adam moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(num_parameters: usize, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_parameters],
            v: vec![0.0; num_parameters],
            steps: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((x, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

pub mod gradcheck {
    /// Central differences of `f` at `x` with the given step.
    pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|k| {
                let orig = probe[k];
                probe[k] = orig + step;
                let up = f(&probe);
                probe[k] = orig - step;
                let down = f(&probe);
                probe[k] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    /// `|a − n| / max(|a|, |n|, floor)`. The floor keeps gradients that are
    /// zero up to round-off from producing spurious huge ratios.
    pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| relative_error(*a, *n, floor))
            .fold(0.0, f64::max)
    }
}
