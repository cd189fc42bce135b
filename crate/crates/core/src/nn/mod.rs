//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Weights are stored row-major (`out × in`) in 64-bit floats. A
//! [`ForwardCache`] remembers the parameter generation it was produced with;
//! feeding it to [`Mlp::backward`] after the parameters changed is rejected.

mod checkpoint;
mod rmsprop;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rmsprop::RmsPropState;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softmax,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Softmax => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Softmax,
            3 => Activation::Identity,
            _ => return None,
        })
    }

    fn apply(self, pre: &[f64], out: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.max(0.0);
                }
            }
            Activation::Tanh => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.tanh();
                }
            }
            Activation::Identity => out.copy_from_slice(pre),
            Activation::Softmax => softmax_into(pre, out),
        }
    }
}

/// Softmax with the max logit subtracted first.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Gradient w.r.t. softmax logits given the gradient w.r.t. its output `p`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::Shape { expected: in_dim * out_dim, actual: weights.len() });
        }
        if biases.len() != out_dim {
            return Err(Error::Shape { expected: out_dim, actual: biases.len() });
        }
        Ok(Self { weights, biases, activation, in_dim, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn affine(&self, input: &[f64], pre: &mut [f64]) {
        for (o, row) in self.weights.chunks_exact(self.in_dim).enumerate() {
            pre[o] = self.biases[o] + dot(row, input);
        }
    }
}

/// Dot product with four independent partial sums, in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() - a.len() % 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (wa, wb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            lanes[k] += wa[k] * wb[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a_rest.iter().zip(b_rest) {
        tail += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    pub l2_coeff: f64,
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Per-layer values from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer, followed by the final output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    generation: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], biases: vec![0.0; l.biases.len()] })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    /// Adds the gradient of `coeff · ||θ||²`.
    pub fn add_l2(&mut self, net: &Mlp, coeff: f64) {
        for (g, p) in self.iter_mut().zip(net.params()) {
            *g += 2.0 * coeff * p;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

impl Mlp {
    /// Zero-initialized network; `layers` lists `(width, activation)` per
    /// affine layer.
    pub fn new(input_dim: usize, layers: &[(usize, Activation)]) -> Self {
        let mut dims = input_dim;
        let layers = layers
            .iter()
            .map(|&(width, act)| {
                let layer = DenseLayer::zeros(dims, width, act);
                dims = width;
                layer
            })
            .collect();
        Self { layers, l2_coeff: 0.0, generation: 0 }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape { expected: pair[0].out_dim, actual: pair[1].in_dim });
            }
        }
        Ok(Self { layers, l2_coeff: 0.0, generation: 0 })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// `||θ||²` over weights and biases.
    pub fn squared_norm(&self) -> f64 {
        self.params().map(|p| p * p).sum()
    }

    pub fn param(&self, index: usize) -> f64 {
        *self.params().nth(index).expect("parameter index in range")
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.params_mut().nth(index).expect("parameter index in range") = value;
    }

    /// Uniform `±√(6/(fan_in+fan_out))` weights, zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.generation += 1;
        for layer in &mut self.layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..=bound);
            }
            layer.biases.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), actual: input.len() });
        }
        Ok(())
    }

    /// Output only, without keeping intermediate values.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.out_dim];
            layer.affine(&current, &mut pre);
            let mut out = vec![0.0; layer.out_dim];
            layer.activation.apply(&pre, &mut out);
            current = out;
        }
        Ok(current)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.out_dim];
            layer.affine(activations.last().unwrap(), &mut pre);
            let mut out = vec![0.0; layer.out_dim];
            layer.activation.apply(&pre, &mut out);
            pre_activations.push(pre);
            activations.push(out);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { activations, pre_activations, generation: self.generation }))
    }

    /// Parameter gradients for `∂L/∂output = output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        self.check_cache(cache)?;
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape { expected: self.output_dim(), actual: output_grad.len() });
        }
        let last = self.layers.len() - 1;
        let delta = self.activation_backward(last, cache, output_grad);
        Ok(self.backprop_from(cache, delta))
    }

    /// Parameter gradients given `∂L/∂z` for the final layer's pre-activation
    /// directly. For a softmax head trained with cross-entropy against
    /// `target` this is `predicted - target`, see [`softmax_cross_entropy_grad`].
    pub fn backward_from_logits(&self, cache: &ForwardCache, logit_grad: &[f64]) -> Result<Gradients> {
        self.check_cache(cache)?;
        if logit_grad.len() != self.output_dim() {
            return Err(Error::Shape { expected: self.output_dim(), actual: logit_grad.len() });
        }
        Ok(self.backprop_from(cache, logit_grad.to_vec()))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.generation != self.generation || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::ContractViolation("forward cache does not match current parameters"));
        }
        Ok(())
    }

    fn activation_backward(&self, layer: usize, cache: &ForwardCache, grad_out: &[f64]) -> Vec<f64> {
        let pre = &cache.pre_activations[layer];
        let out = &cache.activations[layer + 1];
        match self.layers[layer].activation {
            Activation::Relu => {
                grad_out.iter().zip(pre).map(|(g, &p)| if p > 0.0 { *g } else { 0.0 }).collect()
            }
            Activation::Tanh => grad_out.iter().zip(out).map(|(g, o)| g * (1.0 - o * o)).collect(),
            Activation::Identity => grad_out.to_vec(),
            Activation::Softmax => softmax_backward(out, grad_out),
        }
    }

    /// `delta` is `∂L/∂z` of the last layer.
    fn backprop_from(&self, cache: &ForwardCache, mut delta: Vec<f64>) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] = d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, x) in row.iter_mut().zip(input) {
                        *w = d * x;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut grad_in = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gi, w) in grad_in.iter_mut().zip(row) {
                    *gi += d * w;
                }
            }
            delta = self.activation_backward(l - 1, cache, &grad_in);
        }
        grads
    }
}

/// Fused softmax + cross-entropy gradient w.r.t. the logits.
pub fn softmax_cross_entropy_grad(predicted: &[f64], target: &[f64]) -> Vec<f64> {
    let total: f64 = target.iter().sum();
    predicted.iter().zip(target).map(|(p, t)| p * total - t).collect()
}
