//! Feed-forward networks with hand-written reverse mode and an Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("layer {layer} takes {inputs} inputs but the previous layer emits {previous}")]
    BrokenChain {
        layer: usize,
        inputs: usize,
        previous: usize,
    },
    #[error("tape does not belong to this network")]
    StaleTape,
    #[error("layer {0} holds non-finite parameters")]
    NonFinite(usize),
    #[error("network has no layers")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    LeakyRelu,
}

/// Affine map `y = act(W x + b)` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Cached per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

/// Parameter gradients laid out like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x *= factor);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    leaky_slope: f64,
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>, leaky_slope: f64) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Empty);
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.len() != layer.inputs * layer.outputs {
                return Err(NnError::ShapeMismatch {
                    expected: layer.inputs * layer.outputs,
                    found: layer.weights.len(),
                });
            }
            if layer.bias.len() != layer.outputs {
                return Err(NnError::ShapeMismatch {
                    expected: layer.outputs,
                    found: layer.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].outputs != layer.inputs {
                return Err(NnError::BrokenChain {
                    layer: i,
                    inputs: layer.inputs,
                    previous: layers[i - 1].outputs,
                });
            }
            if !layer
                .weights
                .iter()
                .chain(&layer.bias)
                .all(|v| v.is_finite())
            {
                return Err(NnError::NonFinite(i));
            }
        }
        Ok(Self {
            layers,
            leaky_slope,
        })
    }

    /// Leaky-ReLU hidden layers and a linear output layer over `widths`
    /// (input width first).
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::Empty);
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Linear
                } else {
                    Activation::LeakyRelu
                };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers, DEFAULT_LEAKY_SLOPE)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn activate(&self, act: Activation, x: f64) -> f64 {
        match act {
            Activation::Linear => x,
            Activation::LeakyRelu if x < 0.0 => self.leaky_slope * x,
            Activation::LeakyRelu => x,
        }
    }

    fn activation_slope(&self, act: Activation, x: f64) -> f64 {
        match act {
            Activation::Linear => 1.0,
            Activation::LeakyRelu if x < 0.0 => self.leaky_slope,
            Activation::LeakyRelu => 1.0,
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut buf = Vec::new();
        for layer in &self.layers {
            layer.affine(&x, &mut buf);
            for v in buf.iter_mut() {
                *v = self.activate(layer.activation, *v);
            }
            std::mem::swap(&mut x, &mut buf);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        self.check_input(input)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.outputs);
            layer.affine(&x, &mut pre);
            let out = pre
                .iter()
                .map(|&v| self.activate(layer.activation, v))
                .collect();
            tape.inputs.push(std::mem::replace(&mut x, out));
            tape.pre.push(pre);
        }
        Ok((x, tape))
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(
        &self,
        tape: &Tape,
        output_gradient: &[f64],
    ) -> Result<(Gradients, Vec<f64>), NnError> {
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_accumulate(tape, output_gradient, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`backward`](Self::backward) but adds into existing gradients.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        output_gradient: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>, NnError> {
        if tape.pre.len() != self.layers.len()
            || tape
                .pre
                .iter()
                .zip(&tape.inputs)
                .zip(&self.layers)
                .any(|((p, i), l)| p.len() != l.outputs || i.len() != l.inputs)
            || grads.layers.len() != self.layers.len()
        {
            return Err(NnError::StaleTape);
        }
        if output_gradient.len() != self.output_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.output_dim(),
                found: output_gradient.len(),
            });
        }
        let mut upstream = output_gradient.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre[l];
            let input = &tape.inputs[l];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(pre)
                .map(|(g, &z)| g * self.activation_slope(layer.activation, z))
                .collect();
            let grad = &mut grads.layers[l];
            let mut down = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                grad.bias[o] += d;
                if d == 0.0 {
                    continue;
                }
                let w_row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let g_row = &mut grad.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for ((g, x), (w, dn)) in g_row
                    .iter_mut()
                    .zip(input)
                    .zip(w_row.iter().zip(down.iter_mut()))
                {
                    *g += d * x;
                    *dn += d * w;
                }
            }
            upstream = down;
        }
        Ok(upstream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Gradients,
    second: Gradients,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    /// One bias-corrected Adam update of `net` along `grads`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NnError> {
        if grads.layers.len() != net.layers.len() || self.first.layers.len() != net.layers.len() {
            return Err(NnError::ShapeMismatch {
                expected: net.layers.len(),
                found: grads.layers.len(),
            });
        }
        for ((layer, g), m) in net.layers.iter().zip(&grads.layers).zip(&self.first.layers) {
            if g.weights.len() != layer.weights.len() || g.bias.len() != layer.bias.len() {
                return Err(NnError::ShapeMismatch {
                    expected: layer.weights.len() + layer.bias.len(),
                    found: g.weights.len() + g.bias.len(),
                });
            }
            if m.weights.len() != layer.weights.len() {
                return Err(NnError::ShapeMismatch {
                    expected: layer.weights.len(),
                    found: m.weights.len(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.first.layers[l];
            let v = &mut self.second.layers[l];
            for i in 0..layer.weights.len() {
                update(
                    &mut layer.weights[i],
                    g.weights[i],
                    &mut m.weights[i],
                    &mut v.weights[i],
                );
            }
            for i in 0..layer.bias.len() {
                update(
                    &mut layer.bias[i],
                    g.bias[i],
                    &mut m.bias[i],
                    &mut v.bias[i],
                );
            }
        }
        Ok(())
    }
}
