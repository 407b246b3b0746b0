//! Minimal feedforward network with reverse-mode gradients.
//!
//! One network carries all policy heads: a velocity head, a progress head
//! squashed onto [0, 1] by a logistic map, and an optional log-variance head
//! (left unsquashed; use sites clamp it before exponentiating). Input is the
//! concatenation of state coordinates, conditioning coordinates and a
//! sinusoidal embedding of the flow time.
//!
//! Parameters live in one flat array (per layer: row-major weights, then
//! biases), which keeps the optimizer and the checkpoint format trivial.

use alloc::vec;
use alloc::vec::Vec;

// Resolves f64 math in no_std builds; redundant (and lint-flagged) when a
// dependency feature pulls std into the crate graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MSGN";
const CHECKPOINT_VERSION: u32 = 1;

/// Range the log-variance head is clamped to before exponentiation.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Activation> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Silu),
            _ => Err(Error::CheckpointCorrupt("unknown activation tag")),
        }
    }
}

/// Input layout: state coordinates, conditioning coordinates, time embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InputSpec {
    pub state_dim: usize,
    pub condition_dim: usize,
    pub time_dim: usize,
}

impl InputSpec {
    pub fn total(&self) -> usize {
        self.state_dim + self.condition_dim + self.time_dim
    }
}

/// Output layout: velocity head, one progress scalar, log-variance head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutputSpec {
    pub velocity_dim: usize,
    pub logvar_dim: usize,
}

impl OutputSpec {
    pub fn total(&self) -> usize {
        self.velocity_dim + 1 + self.logvar_dim
    }
}

/// Head outputs of one forward pass. `progress` is already squashed to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub velocity: Vec<f64>,
    pub progress: f64,
    pub logvar: Vec<f64>,
}

/// Loss cotangent with respect to the head outputs. The progress component is
/// taken with respect to the squashed value; the logistic chain rule is
/// applied inside [`Network::backward`].
#[derive(Debug, Clone)]
pub struct HeadCotangent {
    pub velocity: Vec<f64>,
    pub progress: f64,
    pub logvar: Vec<f64>,
}

/// Cached activations of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // Input to each layer (layer_inputs[0] is the assembled network input).
    layer_inputs: Vec<Vec<f64>>,
    // Pre-activation values of each hidden layer.
    preacts: Vec<Vec<f64>>,
    // Raw (pre-squash) output layer values.
    raw_output: Vec<f64>,
}

/// Fully connected network with a flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    widths: Vec<usize>,
    activation: Activation,
    input: InputSpec,
    output: OutputSpec,
    params: Vec<f64>,
}

impl Network {
    /// Builds a network with Xavier-uniform weights and zero biases, drawn
    /// deterministically from `rng`.
    pub fn new<R: Rng + ?Sized>(
        input: InputSpec,
        hidden: &[usize],
        output: OutputSpec,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Network> {
        if input.total() == 0 {
            return Err(Error::InvalidConfig("network input dimension is zero".into()));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("zero-width hidden layer".into()));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input.total());
        widths.extend_from_slice(hidden);
        widths.push(output.total());

        let mut params = Vec::with_capacity(param_count(&widths));
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push((rng.random::<f64>() * 2.0 - 1.0) * scale);
            }
            params.extend(core::iter::repeat(0.0).take(fan_out));
        }
        Ok(Network {
            widths,
            activation,
            input,
            output,
            params,
        })
    }

    /// Zeroes the output layer so the initial velocity field is identically
    /// zero and the progress head starts at 0.5.
    pub fn zero_output_layer(&mut self) {
        let last = self.widths.len() - 2;
        let offset = layer_offset(&self.widths, last);
        for p in self.params[offset..].iter_mut() {
            *p = 0.0;
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn output_spec(&self) -> OutputSpec {
        self.output
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn assemble_input(&self, state: &[f64], condition: &[f64], t: f64) -> Result<Vec<f64>> {
        if state.len() != self.input.state_dim {
            return Err(Error::DimensionMismatch {
                what: "network state input",
                expected: self.input.state_dim,
                got: state.len(),
            });
        }
        if condition.len() != self.input.condition_dim {
            return Err(Error::DimensionMismatch {
                what: "network condition input",
                expected: self.input.condition_dim,
                got: condition.len(),
            });
        }
        let mut input = Vec::with_capacity(self.input.total());
        input.extend_from_slice(state);
        input.extend_from_slice(condition);
        input.extend(time_embedding(t, self.input.time_dim));
        Ok(input)
    }

    pub fn forward(&self, state: &[f64], condition: &[f64], t: f64) -> Result<HeadOutputs> {
        let (out, _) = self.forward_cached(state, condition, t)?;
        Ok(out)
    }

    pub fn forward_cached(
        &self,
        state: &[f64],
        condition: &[f64],
        t: f64,
    ) -> Result<(HeadOutputs, ForwardCache)> {
        let input = self.assemble_input(state, condition, t)?;
        let layers = self.widths.len() - 1;
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut preacts = Vec::with_capacity(layers.saturating_sub(1));
        let mut current = input;
        for l in 0..layers {
            layer_inputs.push(current.clone());
            let (w, b) = self.layer(l);
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut next = vec![0.0; fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(current.iter()) {
                    acc += wi * xi;
                }
                next[o] = acc;
            }
            if l + 1 < layers {
                preacts.push(next.clone());
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            current = next;
        }
        let raw_output = current;
        let v = self.output.velocity_dim;
        let outputs = HeadOutputs {
            velocity: raw_output[..v].to_vec(),
            progress: sigmoid(raw_output[v]),
            logvar: raw_output[v + 1..].to_vec(),
        };
        Ok((
            outputs,
            ForwardCache {
                layer_inputs,
                preacts,
                raw_output,
            },
        ))
    }

    /// Parameter gradient for the forward pass in `cache` under the given
    /// head cotangent. Layout matches [`Network::params`].
    pub fn backward(&self, cache: &ForwardCache, cot: &HeadCotangent) -> Result<Vec<f64>> {
        let v = self.output.velocity_dim;
        if cot.velocity.len() != v {
            return Err(Error::DimensionMismatch {
                what: "velocity cotangent",
                expected: v,
                got: cot.velocity.len(),
            });
        }
        if cot.logvar.len() != self.output.logvar_dim {
            return Err(Error::DimensionMismatch {
                what: "logvar cotangent",
                expected: self.output.logvar_dim,
                got: cot.logvar.len(),
            });
        }
        let layers = self.widths.len() - 1;
        let mut grad = vec![0.0; self.params.len()];

        // Chain the progress squash: d/draw sigmoid = p (1 - p).
        let p = sigmoid(cache.raw_output[v]);
        let mut delta: Vec<f64> = Vec::with_capacity(self.output.total());
        delta.extend_from_slice(&cot.velocity);
        delta.push(cot.progress * p * (1.0 - p));
        delta.extend_from_slice(&cot.logvar);

        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let offset = layer_offset(&self.widths, l);
            let input = &cache.layer_inputs[l];
            let (w, _) = self.layer(l);
            for o in 0..fan_out {
                let g = delta[o];
                let row = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (gi, xi) in row.iter_mut().zip(input.iter()) {
                    *gi += g * xi;
                }
            }
            let bias_offset = offset + fan_in * fan_out;
            grad[bias_offset..bias_offset + fan_out].copy_from_slice(&delta);

            if l > 0 {
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let g = delta[o];
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (pi, wi) in prev.iter_mut().zip(row.iter()) {
                        *pi += g * wi;
                    }
                }
                let pre = &cache.preacts[l - 1];
                for (pi, zi) in prev.iter_mut().zip(pre.iter()) {
                    *pi *= self.activation.derivative(*zi);
                }
                delta = prev;
            }
        }
        Ok(grad)
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let offset = layer_offset(&self.widths, l);
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }

    /// Self-describing binary encoding: header plus flat little-endian
    /// parameter array. `from_bytes(to_bytes())` reproduces forward outputs
    /// bitwise.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.activation.tag());
        for v in [
            self.input.state_dim,
            self.input.condition_dim,
            self.input.time_dim,
            self.output.velocity_dim,
            self.output.logvar_dim,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                got: version,
            });
        }
        let activation = Activation::from_tag(r.u8()?)?;
        let input = InputSpec {
            state_dim: r.u32()? as usize,
            condition_dim: r.u32()? as usize,
            time_dim: r.u32()? as usize,
        };
        let output = OutputSpec {
            velocity_dim: r.u32()? as usize,
            logvar_dim: r.u32()? as usize,
        };
        let n_widths = r.u32()? as usize;
        if n_widths < 2 || n_widths > 64 {
            return Err(Error::CheckpointCorrupt("implausible layer count"));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(r.u32()? as usize);
        }
        if widths[0] != input.total() || widths[n_widths - 1] != output.total() {
            return Err(Error::CheckpointCorrupt("width/spec disagreement"));
        }
        let n_params = r.u64()? as usize;
        if n_params != param_count(&widths) {
            return Err(Error::CheckpointCorrupt("parameter count disagreement"));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.f64()?);
        }
        if !r.exhausted() {
            return Err(Error::CheckpointCorrupt("trailing bytes"));
        }
        Ok(Network {
            widths,
            activation,
            input,
            output,
            params,
        })
    }
}

/// Adaptive-moment (Adam) optimizer state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, learning_rate: f64) -> OptimizerState {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update in place. Errors with "diverged" on a non-finite gradient.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer parameters",
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Sinusoidal embedding of the flow time with geometrically spaced
/// frequencies; `dim` must be even.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = (1u64 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn param_count(widths: &[usize]) -> usize {
    widths
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

fn layer_offset(widths: &[usize], layer: usize) -> usize {
    widths[..layer]
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum::<usize>()
        + if layer > 0 {
            widths[layer - 1] * widths[layer] + widths[layer]
        } else {
            0
        }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
