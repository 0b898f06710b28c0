//! Small dense feed-forward networks with exact backpropagation and Adam.
//!
//! Parameters of a network live in one flat `f64` buffer. Layer `l` stores
//! its weight matrix (row-major, `out x in`) followed by its bias vector, so
//! gradients and optimizer moments are plain vectors of the same length.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

/// Feed-forward network: ReLU on hidden layers, configurable output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    output_activation: Activation,
}

/// Post-activation values of every layer, recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn layout(sizes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least 2 layer sizes, got {}",
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive: {sizes:?}")));
    }
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut total = 0;
    for pair in sizes.windows(2) {
        offsets.push(total);
        total += pair[1] * pair[0] + pair[1];
    }
    Ok((offsets, total))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], output_activation: Activation) -> Result<Self> {
        let (offsets, total) = layout(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            offsets,
            params: vec![0.0; total],
            output_activation,
        })
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(sizes: &[usize], output_activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, output_activation)?;
        for l in 0..net.n_layers() {
            let fan_in = net.sizes[l];
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in net.weights_mut(l) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], output_activation: Activation, params: Vec<f64>) -> Result<Self> {
        let (offsets, total) = layout(sizes)?;
        if params.len() != total {
            return Err(Error::Dimension {
                expected: total,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            offsets,
            params,
            output_activation,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_range(&self, l: usize) -> (usize, usize, usize) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.offsets[l];
        (w, w + fan_in * fan_out, w + fan_in * fan_out + fan_out)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let (w, b, _) = self.layer_range(l);
        &self.params[w..b]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let (w, b, _) = self.layer_range(l);
        &mut self.params[w..b]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, b, e) = self.layer_range(l);
        &self.params[b..e]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, b, e) = self.layer_range(l);
        &mut self.params[b..e]
    }

    /// Multiplies the weights of the last layer by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.n_layers() - 1;
        for w in self.weights_mut(last) {
            *w *= factor;
        }
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            self.output_activation
        } else {
            Activation::Relu
        }
    }

    fn layer_forward(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let fan_in = self.sizes[l];
        let w = self.weights(l);
        let b = self.bias(l);
        out.clear();
        out.extend(w.chunks_exact(fan_in).zip(b).map(|(row, bi)| bi + dot(row, x)));
        if self.activation(l) == Activation::Relu {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_size() {
            return Err(Error::Dimension {
                expected: self.input_size(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for l in 0..self.n_layers() {
            self.layer_forward(l, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        for l in 0..self.n_layers() {
            let mut out = Vec::with_capacity(self.sizes[l + 1]);
            self.layer_forward(l, &acts[l], &mut out);
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Accumulates into `grads` the gradient of `output · output_grad` with
    /// respect to every parameter, and returns the gradient with respect to
    /// the input.
    pub fn backward_trace(&self, trace: &Trace, output_grad: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if output_grad.len() != self.output_size() {
            return Err(Error::Dimension {
                expected: self.output_size(),
                got: output_grad.len(),
            });
        }
        if grads.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                got: grads.len(),
            });
        }
        let mut delta = output_grad.to_vec();
        for l in (0..self.n_layers()).rev() {
            let fan_in = self.sizes[l];
            let out = &trace.acts[l + 1];
            if self.activation(l) == Activation::Relu {
                for (d, a) in delta.iter_mut().zip(out) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &trace.acts[l];
            let (w0, b0, e0) = self.layer_range(l);
            {
                let (gw, gb) = grads[w0..e0].split_at_mut(b0 - w0);
                for ((row, gbi), &d) in gw.chunks_exact_mut(fan_in).zip(gb).zip(&delta) {
                    if d != 0.0 {
                        axpy(d, x, row);
                        *gbi += d;
                    }
                }
            }
            let mut prev = vec![0.0; fan_in];
            for (row, &d) in self.params[w0..b0].chunks_exact(fan_in).zip(&delta) {
                if d != 0.0 {
                    axpy(d, row, &mut prev);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Parameter gradients of `forward(input) · output_grad`.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![0.0; self.n_params()];
        self.backward_trace(&trace, output_grad, &mut grads)?;
        Ok(grads)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self::with_hyper(n_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(n_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn for_net(net: &Mlp) -> Self {
        Self::new(net.n_params())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients without
    /// touching parameters or state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Dimension {
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be >= 0, got {lr}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {}; Adam update rejected",
                grads[i]
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// `lr0 * (1 - progress)`, floored at zero.
pub fn linear_decay(lr0: f64, progress: f64) -> f64 {
    (lr0 * (1.0 - progress)).max(0.0)
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// Checkpoint format, all integers and floats little-endian:
//   magic      8 bytes  "AGRLMLP\0"
//   version    u32      1
//   out_act    u32      0 = identity, 1 = relu
//   n_sizes    u32
//   sizes      u32 * n_sizes
//   n_params   u64
//   params     f64 * n_params   (layer by layer: weights row-major, then bias)

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AGRLMLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_mlp<W: Write>(w: &mut W, net: &Mlp) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let act: u32 = match net.output_activation {
        Activation::Identity => 0,
        Activation::Relu => 1,
    };
    w.write_all(&act.to_le_bytes())?;
    w.write_all(&(net.sizes.len() as u32).to_le_bytes())?;
    for &s in &net.sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(net.params.len() as u64).to_le_bytes())?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let act = match read_u32(r)? {
        0 => Activation::Identity,
        1 => Activation::Relu,
        other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
    };
    let n_sizes = read_u32(r)? as usize;
    if n_sizes > 64 {
        return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes)
        .map(|_| read_u32(r).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n_params = u64::from_le_bytes(b8) as usize;
    let (_, expected) = layout(&sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if n_params != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {n_params} does not match layer sizes {sizes:?}"
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        r.read_exact(&mut b8)?;
        params.push(f64::from_le_bytes(b8));
    }
    Mlp::from_params(&sizes, act, params)
}
