//! Sequential multilayer perceptrons with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as its
//! row-major `out x in` weight matrix followed by its bias. [`Gradients`] uses
//! exactly the same layout, so optimizers can work elementwise without knowing
//! about layers.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{check_dim, Result, SmcError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    input: usize,
    output: usize,
    activation: Activation,
    offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.input * self.output
    }

    fn len(&self) -> usize {
        self.weight_len() + self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Activations cached by [`Mlp::forward_tape`]: the input to every layer plus
/// the final output, one row per batch instance.
#[derive(Debug, Clone)]
pub struct GradientTape {
    activations: Vec<Matrix>,
    n_params: usize,
}

impl GradientTape {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape always holds the input")
    }
}

/// Parameter gradients, congruent with [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients(vec![0.0; net.params.len()])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Mlp {
    /// Builds a network from `(input, output, activation)` triples with all
    /// parameters zero.
    pub fn zeros(spec: &[(usize, usize, Activation)]) -> Result<Self> {
        if spec.is_empty() {
            return Err(SmcError::invalid("network needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(spec.len());
        let mut offset = 0;
        for (i, &(input, output, activation)) in spec.iter().enumerate() {
            if input == 0 || output == 0 {
                return Err(SmcError::invalid("layer dimensions must be positive"));
            }
            if i > 0 {
                check_dim(spec[i - 1].1, input)?;
            }
            if activation == Activation::Softmax && i + 1 != spec.len() {
                return Err(SmcError::invalid("softmax is only allowed on the final layer"));
            }
            let shape = LayerShape {
                input,
                output,
                activation,
                offset,
            };
            offset += shape.len();
            layers.push(shape);
        }
        Ok(Self {
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Chain of dense layers through `dims`, ReLU between layers and `output`
    /// on the last one. Weights are He-uniform for ReLU layers and
    /// Glorot-uniform otherwise; biases start at zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(SmcError::invalid("need at least input and output dimensions"));
        }
        let spec: Vec<_> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() { output } else { Activation::Relu };
                (w[0], w[1], act)
            })
            .collect();
        let mut net = Self::zeros(&spec)?;
        for layer in net.layers.clone() {
            let limit = match layer.activation {
                Activation::Relu => (6.0 / layer.input as f64).sqrt(),
                _ => (6.0 / (layer.input + layer.output) as f64).sqrt(),
            };
            for w in &mut net.params[layer.offset..layer.offset + layer.weight_len()] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().unwrap().activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix (row-major, `out x in`) and bias of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[i];
        let w_end = l.offset + l.weight_len();
        (&self.params[l.offset..w_end], &self.params[w_end..l.offset + l.len()])
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let l = self.layers[i];
        let (w, b) = self.params[l.offset..l.offset + l.len()].split_at_mut(l.weight_len());
        (w, b)
    }

    pub fn layer_activation(&self, i: usize) -> Activation {
        self.layers[i].activation
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = self.layer(i);
            next.clear();
            next.extend_from_slice(b);
            affine_into(w, layer.input, &cur, &mut next);
            activate(layer.activation, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_tape(x)?.activations.pop().unwrap())
    }

    /// Forward pass over a batch, keeping what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, x: &Matrix) -> Result<GradientTape> {
        check_dim(self.input_dim(), x.cols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = self.layer(i);
            let prev = activations.last().unwrap();
            let mut out = Matrix::zeros(prev.rows(), layer.output);
            for r in 0..prev.rows() {
                let o = out.row_mut(r);
                o.copy_from_slice(b);
                affine_into(w, layer.input, prev.row(r), o);
                activate(layer.activation, o);
            }
            activations.push(out);
        }
        Ok(GradientTape {
            activations,
            n_params: self.params.len(),
        })
    }

    /// Reverse pass: gradients of `sum(output * upstream)` with respect to the
    /// parameters and to the batch input.
    pub fn backward(&self, tape: &GradientTape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        if tape.activations.len() != self.layers.len() + 1 || tape.n_params != self.params.len() {
            return Err(SmcError::invalid("gradient tape was recorded on a different network"));
        }
        let out = tape.output();
        if upstream.rows() != out.rows() {
            return Err(SmcError::LengthMismatch {
                left: upstream.rows(),
                right: out.rows(),
            });
        }
        check_dim(out.cols(), upstream.cols())?;

        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[i];
            let output = &tape.activations[i + 1];
            // Through the activation: delta becomes dL/d(pre-activation).
            for r in 0..delta.rows() {
                let y = output.row(r);
                let d = delta.row_mut(r);
                match layer.activation {
                    Activation::Identity => {}
                    Activation::Relu => {
                        for (dv, yv) in d.iter_mut().zip(y) {
                            if *yv <= 0.0 {
                                *dv = 0.0;
                            }
                        }
                    }
                    Activation::Softmax => {
                        let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                        for (dv, yv) in d.iter_mut().zip(y) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                }
            }
            let (w, _) = self.layer(i);
            let w_off = layer.offset;
            let b_off = layer.offset + layer.weight_len();
            let mut next = Matrix::zeros(delta.rows(), layer.input);
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let x = input.row(r);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    grads[b_off + o] += dv;
                    let g_row = &mut grads[w_off + o * layer.input..w_off + (o + 1) * layer.input];
                    for (g, xv) in g_row.iter_mut().zip(x) {
                        *g += dv * xv;
                    }
                    let w_row = &w[o * layer.input..(o + 1) * layer.input];
                    for (n, wv) in next.row_mut(r).iter_mut().zip(w_row) {
                        *n += dv * wv;
                    }
                }
            }
            delta = next;
        }
        Ok((Gradients(grads), delta))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layers: (0..self.layers.len())
                .map(|i| {
                    let (w, b) = self.layer(i);
                    CheckpointLayer {
                        input: self.layers[i].input,
                        output: self.layers[i].output,
                        activation: self.layers[i].activation,
                        weights: w.to_vec(),
                        bias: b.to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: Vec<_> = ckpt
            .layers
            .iter()
            .map(|l| (l.input, l.output, l.activation))
            .collect();
        let mut net = Self::zeros(&spec)?;
        for (i, l) in ckpt.layers.iter().enumerate() {
            let (w, b) = net.layer_mut(i);
            check_dim(w.len(), l.weights.len())?;
            check_dim(b.len(), l.bias.len())?;
            w.copy_from_slice(&l.weights);
            b.copy_from_slice(&l.bias);
        }
        if !net.params.iter().all(|p| p.is_finite()) {
            return Err(SmcError::NonFinite("network checkpoint".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| SmcError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| SmcError::file(path, e))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized network: per-layer header plus row-major parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn affine_into(w: &[f64], input: usize, x: &[f64], out: &mut [f64]) {
    for (o, acc) in out.iter_mut().enumerate() {
        let row = &w[o * input..(o + 1) * input];
        *acc += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn activate(act: Activation, v: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Softmax => {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in v.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            v.iter_mut().for_each(|x| *x /= sum);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_dim(params.len(), grads.len())?;
    check_dim(params.len(), state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Network plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainable {
    pub net: Mlp,
    pub state: AdamState,
}

impl Trainable {
    pub fn new(net: Mlp) -> Self {
        let n = net.params().len();
        Self {
            net,
            state: AdamState::new(n),
        }
    }

    pub fn step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        adam_step(self.net.params_mut(), grads.as_slice(), &mut self.state, cfg)
    }
}
