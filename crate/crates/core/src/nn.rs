//! Small fully connected networks with hand-written backprop and AdamW.
//!
//! Samples are columns: a batch of `B` inputs is an `in x B` matrix.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;

/// ReLU network with identity output. Parameters live in one flat buffer,
/// layer by layer, weights (column-major `out x in`) then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer. Entry `l > 0` is also the post-ReLU output of layer `l - 1`.
    inputs: Vec<DMatrix<f64>>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
        return Err(Error::invalid("network needs at least two positive layer widths"));
    }
    Ok(())
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_count(widths)],
        })
    }

    /// He-uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut r = rng(seed);
        let mut off = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = r.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    fn weight(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer);
        DMatrixView::from_slice(&self.params[off..off + i * o], o, i)
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer) + i * o;
        &self.params[off..off + o]
    }

    fn affine(&self, layer: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = self.weight(layer) * x;
        let b = self.bias(layer);
        for mut col in z.column_iter_mut() {
            for (v, bi) in col.iter_mut().zip(b) {
                *v += bi;
            }
        }
        z
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, &h);
            if l + 1 < self.n_layers() {
                z.apply(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, Tape { inputs }))
    }

    /// Parameter gradient of `sum(upstream .* output)`.
    pub fn backward(&self, tape: &Tape, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        let batch = tape.inputs[0].ncols();
        if upstream.nrows() != self.output_dim() || upstream.ncols() != batch {
            return Err(Error::invalid("upstream gradient shape does not match the forward pass"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = upstream.clone();
        for l in (0..self.n_layers()).rev() {
            let input = &tape.inputs[l];
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let dw = &delta * input.transpose();
            grad[off..off + i * o].copy_from_slice(dw.as_slice());
            for (r, g) in grad[off + i * o..off + i * o + o].iter_mut().enumerate() {
                *g = delta.row(r).sum();
            }
            if l > 0 {
                let mut prev = self.weight(l).transpose() * &delta;
                // the stored input is post-ReLU, so zero entries mark inactive units
                prev.zip_apply(input, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = prev;
            }
        }
        Ok(grad)
    }

    pub fn to_json(&self) -> Vec<LayerJson> {
        (0..self.n_layers())
            .map(|l| {
                let w = self.weight(l);
                LayerJson {
                    weight: w.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    bias: self.bias(l).to_vec(),
                }
            })
            .collect()
    }

    pub fn from_json(widths: &[usize], layers: &[LayerJson]) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        if layers.len() != net.n_layers() {
            return Err(Error::Data(format!(
                "expected {} layers, found {}",
                net.n_layers(),
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (i, o) = (widths[l], widths[l + 1]);
            if layer.weight.len() != o || layer.weight.iter().any(|r| r.len() != i) || layer.bias.len() != o {
                return Err(Error::Data(format!("layer {l} does not have shape {o}x{i}")));
            }
            let off = net.layer_offset(l);
            for (r, row) in layer.weight.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    net.params[off + c * o + r] = *v;
                }
            }
            net.params[off + i * o..off + i * o + o].copy_from_slice(&layer.bias);
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("network parameters must be finite".into()));
        }
        Ok(net)
    }
}

/// One layer as stored on disk; `weight` is row-major `out x in`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerJson {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay applied to every parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step_at_rate(params, grad, self.config.learning_rate);
    }

    /// One update with `lr` in place of the configured learning rate.
    pub fn step_at_rate(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let c = &self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
            params[k] *= 1.0 - lr * c.weight_decay;
            params[k] -= lr * (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + c.eps);
        }
    }
}
