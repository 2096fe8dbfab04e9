//! Dense multilayer perceptrons with exact reverse-mode gradients, Adam, and
//! global-norm gradient clipping.
//!
//! Every network is a chain of affine layers `y = act(W x + b)`. Batches are
//! row-major `batch x width` slices. Each output entry is computed as the same
//! sequence of floating point operations regardless of batch size, so a record
//! evaluated alone and inside a minibatch produce bit-identical results.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a perceptron: input width followed by one entry per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Hidden layers share `hidden_act`; the last layer uses `output_act`.
    pub fn new(
        input_width: usize,
        hidden: &[usize],
        output_width: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let mut layer_widths = hidden.to_vec();
        layer_widths.push(output_width);
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(output_act);
        MlpSpec { input_width, layer_widths, activations }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::config("perceptron needs at least one layer"));
        }
        if self.layer_widths.len() != self.activations.len() {
            return Err(Error::config(format!(
                "{} layer widths but {} activations",
                self.layer_widths.len(),
                self.activations.len()
            )));
        }
        if self.input_width == 0 || self.layer_widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            self.layer_widths[layer - 1]
        }
    }
}

/// A named matrix of parameters together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamBlock {
            name: name.into(),
            rows,
            cols,
            values: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

static NEXT_MLP_ID: AtomicU64 = AtomicU64::new(1);

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    owner: u64,
    version: u64,
    batch: usize,
    /// Input to each layer (`layers.len()` entries).
    inputs: Vec<Vec<f64>>,
    /// Post-activation output of the last layer.
    output: Vec<f64>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug)]
pub struct Mlp {
    id: u64,
    version: u64,
    spec: MlpSpec,
    /// `[W0, b0, W1, b1, ...]`; `Wl` is `out x in`, row-major.
    blocks: Vec<ParamBlock>,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Mlp {
            id: NEXT_MLP_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            spec: self.spec.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.blocks == other.blocks
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(name: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(2 * spec.layer_widths.len());
        for (l, &out) in spec.layer_widths.iter().enumerate() {
            let inp = spec.layer_input(l);
            blocks.push(ParamBlock::zeros(format!("{name}.layer{l}.weight"), out, inp));
            blocks.push(ParamBlock::zeros(format!("{name}.layer{l}.bias"), out, 1));
        }
        Ok(Mlp { id: NEXT_MLP_ID.fetch_add(1, Ordering::Relaxed), version: 0, spec, blocks })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(name: &str, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut mlp = Mlp::zeros(name, spec)?;
        for l in 0..mlp.spec.layer_widths.len() {
            let bound = 1.0 / (mlp.spec.layer_input(l) as f64).sqrt();
            for w in mlp.blocks[2 * l].values.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        self.version += 1;
        &mut self.blocks
    }

    pub fn weight(&self, layer: usize) -> &ParamBlock {
        &self.blocks[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &ParamBlock {
        &self.blocks[2 * layer + 1]
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layer_widths.len()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(ParamBlock::zero_grad);
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<()> {
        if input.len() != batch * self.spec.input_width {
            return Err(Error::config(format!(
                "input of length {} does not match batch {} x width {}",
                input.len(),
                batch,
                self.spec.input_width
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &[f64], batch: usize) -> Vec<f64> {
        let inp = self.spec.layer_input(l);
        let out = self.spec.layer_widths[l];
        let act = self.spec.activations[l];
        let w = &self.blocks[2 * l].values;
        let b = &self.blocks[2 * l + 1].values;
        let mut y = vec![0.0; batch * out];
        for r in 0..batch {
            let xr = &x[r * inp..(r + 1) * inp];
            let yr = &mut y[r * out..(r + 1) * out];
            for o in 0..out {
                yr[o] = act.apply(b[o] + dot(&w[o * inp..(o + 1) * inp], xr));
            }
        }
        y
    }

    /// Forward pass without recording a tape.
    pub fn predict_batch(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(input, batch)?;
        let mut x = self.layer_forward(0, input, batch);
        for l in 1..self.num_layers() {
            x = self.layer_forward(l, &x, batch);
        }
        Ok(x)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.predict_batch(input, 1)
    }

    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input, batch)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        inputs.push(input.to_vec());
        for l in 0..self.num_layers() {
            let y = self.layer_forward(l, &inputs[l], batch);
            inputs.push(y);
        }
        let output = inputs.pop().expect("at least one layer");
        let tape = Tape { owner: self.id, version: self.version, batch, inputs, output: output.clone() };
        Ok((output, tape))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.forward_batch(input, 1)
    }

    fn check_tape(&self, tape: &Tape, upstream: &[f64]) -> Result<()> {
        if tape.owner != self.id || tape.version != self.version {
            return Err(Error::usage("tape was recorded by a different or since-modified network"));
        }
        if upstream.len() != tape.batch * self.spec.output_width() {
            return Err(Error::usage(format!(
                "upstream gradient of length {} does not match batch {} x output {}",
                upstream.len(),
                tape.batch,
                self.spec.output_width()
            )));
        }
        Ok(())
    }

    fn backward_impl(&mut self, tape: &Tape, upstream: &[f64], want_input: bool) -> Result<Option<Vec<f64>>> {
        self.check_tape(tape, upstream)?;
        let batch = tape.batch;
        let layers = self.num_layers();
        // gradient w.r.t. the post-activation output of the current layer
        let mut g_out = upstream.to_vec();
        for l in (0..layers).rev() {
            let inp = self.spec.layer_input(l);
            let out = self.spec.layer_widths[l];
            let act = self.spec.activations[l];
            let y = if l + 1 < layers { &tape.inputs[l + 1] } else { &tape.output };
            // pre-activation gradient
            for (g, &yv) in g_out.iter_mut().zip(y.iter()) {
                *g *= act.derivative_from_output(yv);
            }
            let x = &tape.inputs[l];
            {
                let (wb, bb) = self.blocks.split_at_mut(2 * l + 1);
                let wgrad = &mut wb[2 * l].grad;
                let bgrad = &mut bb[0].grad;
                for r in 0..batch {
                    let xr = &x[r * inp..(r + 1) * inp];
                    let gr = &g_out[r * out..(r + 1) * out];
                    for o in 0..out {
                        let go = gr[o];
                        if go == 0.0 {
                            continue;
                        }
                        bgrad[o] += go;
                        let row = &mut wgrad[o * inp..(o + 1) * inp];
                        for (wg, &xv) in row.iter_mut().zip(xr) {
                            *wg += go * xv;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            let w = &self.blocks[2 * l].values;
            let mut g_in = vec![0.0; batch * inp];
            for r in 0..batch {
                let gr = &g_out[r * out..(r + 1) * out];
                let gi = &mut g_in[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let go = gr[o];
                    if go == 0.0 {
                        continue;
                    }
                    for (d, &wv) in gi.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *d += go * wv;
                    }
                }
            }
            g_out = g_in;
        }
        Ok(Some(g_out))
    }

    /// Accumulates `d(output . upstream)/d(params)` into each block's `grad`
    /// and returns the gradient with respect to the input batch.
    pub fn backward(&mut self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward_impl(tape, upstream, true)?.expect("input gradient requested"))
    }

    /// Like [`Mlp::backward`] but skips the input gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape, upstream: &[f64]) -> Result<()> {
        self.backward_impl(tape, upstream, false).map(|_| ())
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn for_blocks<'a>(blocks: impl IntoIterator<Item = &'a ParamBlock>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = blocks.into_iter().map(|b| (vec![0.0; b.len()], vec![0.0; b.len()])).unzip();
        OptimizerState { first_moment: m, second_moment: v, step_count: 0 }
    }
}

/// One bias-corrected Adam update using the gradients stored in `blocks`.
///
/// Gradients are checked for finiteness before any parameter is touched.
pub fn adam_step(blocks: &mut [&mut ParamBlock], state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    if blocks.len() != state.first_moment.len() {
        return Err(Error::config(format!(
            "optimizer tracks {} blocks but {} were supplied",
            state.first_moment.len(),
            blocks.len()
        )));
    }
    for (i, b) in blocks.iter().enumerate() {
        if state.first_moment[i].len() != b.len() {
            return Err(Error::config(format!("optimizer moment shape mismatch for {}", b.name)));
        }
        if let Some(j) = b.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                location: format!("{}[{j}]", b.name),
                detail: format!("non-finite gradient {}", b.grad[j]),
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, b) in blocks.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..b.values.len() {
            let g = b.grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            b.values[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[&mut [f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// [`clip_global_norm`] over the `grad` fields of parameter blocks.
pub fn clip_block_grads(blocks: &mut [&mut ParamBlock], max_norm: f64) -> f64 {
    let mut grads: Vec<&mut [f64]> = blocks.iter_mut().map(|b| b.grad.as_mut_slice()).collect();
    clip_global_norm(&mut grads, max_norm)
}
