//! Flow-matching policy with a learnable noise head and a value head.
//!
//! The policy works in a normalized action space: position deltas are
//! expressed in units of `action_scale` meters and the gripper column is
//! `+1` (close) / `-1` (open). Conversion to world [`ActionChunk`]s happens
//! at the boundary.
//!
//! Conditioning layout for the velocity and noise heads is
//! `flat(A) ‖ z ‖ τ`. The noise and value heads consume `z` under a
//! stop-gradient: their input gradients are never propagated into the
//! encoder.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, MlpSpec, ParamBlock, Tape};
use crate::error::{Error, Result};
use crate::spaces::{ActionChunk, ObsLayout, ObservationVector, PROPRIO_DIM};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Workspace point that observation positions are centered on.
pub const FEATURE_CENTER: [f64; 3] = [0.3, 0.0, 0.05];
pub const FEATURE_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Action chunk length `C`.
    pub chunk_len: usize,
    pub action_dim: usize,
    /// Integration steps `K`.
    pub integration_steps: usize,
    pub encoder_hidden: Vec<usize>,
    /// Width of the hidden state `z`.
    pub latent_dim: usize,
    pub head_hidden: Vec<usize>,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Meters per normalized action unit for the position columns.
    pub action_scale: f64,
    /// Softmax temperature of the fixed descriptor-matching features; 0
    /// disables them.
    pub grounding_temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            chunk_len: 4,
            action_dim: 4,
            integration_steps: 10,
            encoder_hidden: vec![64],
            latent_dim: 64,
            head_hidden: vec![64, 64],
            log_std_min: -2.5,
            log_std_max: -2.0,
            action_scale: 0.05,
            grounding_temperature: 0.05,
        }
    }
}

impl PolicyConfig {
    pub fn flat_action(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    pub fn head_input(&self) -> usize {
        self.flat_action() + self.latent_dim + 1
    }

    fn log_std_mid(&self) -> f64 {
        0.5 * (self.log_std_min + self.log_std_max)
    }

    fn log_std_half(&self) -> f64 {
        0.5 * (self.log_std_max - self.log_std_min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.action_dim == 0 || self.integration_steps == 0 || self.latent_dim == 0 {
            return Err(Error::config("chunk length, action width, K and latent width must be positive"));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::config("log-std clamp must satisfy min < max"));
        }
        if !(self.action_scale > 0.0) {
            return Err(Error::config("action scale must be positive"));
        }
        if !(self.grounding_temperature >= 0.0) {
            return Err(Error::config("grounding temperature must be nonnegative"));
        }
        Ok(())
    }
}

/// `z = sg(E(o))` as seen by the noise and value heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

/// Recorded sample of the noise-injected integration `A^0 ... A^1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingChain {
    pub steps: usize,
    pub width: usize,
    /// `steps + 1` flattened chunks.
    pub chunks: Vec<f64>,
    /// `steps` per-step Gaussian means.
    pub means: Vec<f64>,
    /// `steps` per-step standard deviations.
    pub stds: Vec<f64>,
    pub log_prob: f64,
}

impl DenoisingChain {
    pub fn chunk(&self, k: usize) -> &[f64] {
        &self.chunks[k * self.width..(k + 1) * self.width]
    }

    /// `A^1`, the executed action in normalized units.
    pub fn action(&self) -> &[f64] {
        self.chunk(self.steps)
    }
}

fn std_normal_logpdf_sum(x: &[f64]) -> f64 {
    x.iter().map(|v| -0.5 * v * v - HALF_LN_2PI).sum()
}

/// `log N(x; mean, diag exp(log_std)^2)`.
fn gaussian_logpdf_sum(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let u = (x[i] - mean[i]) / log_std[i].exp();
        acc += -0.5 * u * u - log_std[i] - HALF_LN_2PI;
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPolicy {
    pub config: PolicyConfig,
    pub layout: ObsLayout,
    pub encoder: Mlp,
    /// Predicts the clean chunk; see [`velocity_from_output`].
    pub velocity: Mlp,
    pub noise: Mlp,
    pub value_head: Mlp,
}

/// Activations of one minibatch evaluation, consumed by
/// [`FlowPolicy::backward_minibatch`].
pub struct MinibatchTape {
    batch: usize,
    encoder: Tape,
    velocity: Vec<Tape>,
    noise: Vec<Tape>,
    value: Tape,
    /// `x - mean` per step, `steps x batch x width`.
    residual: Vec<f64>,
    /// Per-step standard deviations, same layout.
    std: Vec<f64>,
}

pub struct MinibatchEval {
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub tape: MinibatchTape,
}

impl FlowPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, layout: ObsLayout, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let enc_spec =
            MlpSpec::new(feature_width(&config, &layout), &config.encoder_hidden, config.latent_dim, Activation::Tanh, Activation::Tanh);
        let head_in = config.head_input();
        let vel_spec =
            MlpSpec::new(head_in, &config.head_hidden, config.flat_action(), Activation::Tanh, Activation::Identity);
        let noise_spec =
            MlpSpec::new(head_in, &config.head_hidden, config.flat_action(), Activation::Tanh, Activation::Tanh);
        let value_spec = MlpSpec::new(config.latent_dim, &config.head_hidden, 1, Activation::Tanh, Activation::Identity);
        let encoder = Mlp::new("encoder", enc_spec, rng)?;
        let velocity = Mlp::new("velocity", vel_spec, rng)?;
        let mut noise = Mlp::new("noise", noise_spec, rng)?;
        let value_head = Mlp::new("value", value_spec, rng)?;
        // Zero final layer: tanh(0) = 0 puts every log-std at the clamp midpoint.
        let last = noise.num_layers() - 1;
        noise.blocks_mut()[2 * last].values.iter_mut().for_each(|w| *w = 0.0);
        Ok(FlowPolicy { config, layout, encoder, velocity, noise, value_head })
    }

    pub fn k(&self) -> usize {
        self.config.integration_steps
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        self.config.integration_steps = k;
        Ok(())
    }

    pub fn flat_action(&self) -> usize {
        self.config.flat_action()
    }

    /// Network features: positions recentred and rescaled, everything else as
    /// is, followed by the grounding block when enabled (see
    /// [`grounding_features`]).
    pub fn features(&self, flat_obs: &[f64]) -> Result<Vec<f64>> {
        let lay = &self.layout;
        if flat_obs.len() != lay.width() {
            return Err(Error::config(format!(
                "observation width {} does not match configured {}",
                flat_obs.len(),
                lay.width()
            )));
        }
        let mut f = flat_obs.to_vec();
        let norm = |v: &mut [f64]| {
            for i in 0..3 {
                v[i] = (v[i] - FEATURE_CENTER[i]) / FEATURE_SCALE;
            }
        };
        norm(&mut f[0..3]);
        f[3] = 2.0 * f[3] - 1.0;
        let sw = lay.slot_width();
        for s in 0..lay.max_objects {
            let o = lay.slots_offset() + s * sw;
            if f[o + sw - 1] != 0.0 {
                norm(&mut f[o..o + 3]);
            }
        }
        debug_assert_eq!(PROPRIO_DIM, 4);
        if self.config.grounding_temperature > 0.0 {
            f.extend(grounding_features(flat_obs, lay, self.config.grounding_temperature));
        }
        Ok(f)
    }

    fn features_batch(&self, flat_obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let w = self.layout.width();
        if flat_obs.len() != w * batch {
            return Err(Error::config("observation batch has the wrong length"));
        }
        let mut out = Vec::with_capacity(flat_obs.len());
        for r in 0..batch {
            out.extend(self.features(&flat_obs[r * w..(r + 1) * w])?);
        }
        Ok(out)
    }

    pub fn encode_flat(&self, flat_obs: &[f64]) -> Result<HiddenState> {
        let f = self.features(flat_obs)?;
        Ok(HiddenState(self.encoder.predict(&f)?))
    }

    pub fn encode(&self, obs: &ObservationVector) -> Result<HiddenState> {
        self.encode_flat(&obs.flatten(&self.layout)?)
    }

    fn head_input(&self, a: &[f64], z: &[f64], tau: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.config.head_input());
        x.extend_from_slice(a);
        x.extend_from_slice(z);
        x.push(tau);
        x
    }

    fn check_z(&self, z: &HiddenState) -> Result<()> {
        if z.0.len() != self.config.latent_dim {
            return Err(Error::config("hidden state width mismatch"));
        }
        Ok(())
    }

    pub fn velocity_at(&self, a: &[f64], z: &HiddenState, tau: f64) -> Result<Vec<f64>> {
        let out = self.velocity.predict(&self.head_input(a, &z.0, tau))?;
        Ok(velocity_from_output(&out, a, tau))
    }

    /// Per-entry log standard deviation, always inside the configured clamp.
    pub fn log_std_at(&self, a: &[f64], z: &HiddenState, tau: f64) -> Result<Vec<f64>> {
        let raw = self.noise.predict(&self.head_input(a, &z.0, tau))?;
        let (mid, half) = (self.config.log_std_mid(), self.config.log_std_half());
        Ok(raw.into_iter().map(|r| mid + half * r).collect())
    }

    pub fn draw_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.flat_action()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Deterministic Euler integration from `A^0 ~ N(0, I)` drawn from `rng`.
    pub fn sample_ode<R: Rng + ?Sized>(&self, z: &HiddenState, rng: &mut R) -> Result<Vec<f64>> {
        let a0 = self.draw_initial(rng);
        self.integrate_from(z, a0)
    }

    pub fn integrate_from(&self, z: &HiddenState, mut a: Vec<f64>) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let k = self.k();
        let dt = 1.0 / k as f64;
        for step in 0..k {
            let tau = step as f64 * dt;
            let v = self.velocity_at(&a, z, tau)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::PolicyDivergence(format!("non-finite velocity at step {step}")));
            }
            for (ai, vi) in a.iter_mut().zip(&v) {
                *ai += vi * dt;
            }
        }
        Ok(a)
    }

    /// Noise-injected integration with every Gaussian draw taken from `rng`.
    pub fn sample_stochastic<R: Rng + ?Sized>(&self, z: &HiddenState, rng: &mut R) -> Result<DenoisingChain> {
        let a0 = self.draw_initial(rng);
        self.sample_chain_from(z, a0, || rng.sample::<f64, _>(StandardNormal))
    }

    /// Noise-injected integration from a given `A^0` with per-entry standard
    /// normal perturbations supplied by `perturb`.
    pub fn sample_chain_from(
        &self,
        z: &HiddenState,
        a0: Vec<f64>,
        mut perturb: impl FnMut() -> f64,
    ) -> Result<DenoisingChain> {
        self.check_z(z)?;
        let k = self.k();
        let width = self.flat_action();
        if a0.len() != width {
            return Err(Error::config("initial chunk has the wrong width"));
        }
        let dt = 1.0 / k as f64;
        let mut chunks = Vec::with_capacity((k + 1) * width);
        let mut means = Vec::with_capacity(k * width);
        let mut stds = Vec::with_capacity(k * width);
        let mut log_prob = std_normal_logpdf_sum(&a0);
        chunks.extend_from_slice(&a0);
        let mut a = a0;
        for step in 0..k {
            let tau = step as f64 * dt;
            let v = self.velocity_at(&a, z, tau)?;
            let log_std = self.log_std_at(&a, z, tau)?;
            let mean: Vec<f64> = a.iter().zip(&v).map(|(ai, vi)| ai + vi * dt).collect();
            if mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::PolicyDivergence(format!("non-finite mean at step {step}")));
            }
            let next: Vec<f64> = mean.iter().zip(&log_std).map(|(m, ls)| m + ls.exp() * perturb()).collect();
            log_prob += gaussian_logpdf_sum(&next, &mean, &log_std);
            means.extend_from_slice(&mean);
            stds.extend(log_std.iter().map(|ls| ls.exp()));
            chunks.extend_from_slice(&next);
            a = next;
        }
        Ok(DenoisingChain { steps: k, width, chunks, means, stds, log_prob })
    }

    fn check_chain(&self, chain: &DenoisingChain) -> Result<()> {
        if chain.steps != self.k()
            || chain.width != self.flat_action()
            || chain.chunks.len() != (chain.steps + 1) * chain.width
        {
            return Err(Error::usage(format!(
                "chain with {} steps of width {} does not match policy K={} width {}",
                chain.steps,
                chain.width,
                self.k(),
                self.flat_action()
            )));
        }
        Ok(())
    }

    /// Joint log-density of a recorded chain under the current parameters.
    pub fn log_prob(&self, chain: &DenoisingChain, z: &HiddenState) -> Result<f64> {
        self.check_chain(chain)?;
        self.check_z(z)?;
        let dt = 1.0 / self.k() as f64;
        let mut lp = std_normal_logpdf_sum(chain.chunk(0));
        for step in 0..chain.steps {
            let a = chain.chunk(step);
            let tau = step as f64 * dt;
            let v = self.velocity_at(a, z, tau)?;
            let log_std = self.log_std_at(a, z, tau)?;
            let mean: Vec<f64> = a.iter().zip(&v).map(|(ai, vi)| ai + vi * dt).collect();
            lp += gaussian_logpdf_sum(chain.chunk(step + 1), &mean, &log_std);
        }
        Ok(lp)
    }

    pub fn value(&self, z: &HiddenState) -> Result<f64> {
        self.check_z(z)?;
        Ok(self.value_head.predict(&z.0)?[0])
    }

    /// Normalized chunk → world chunk in meters.
    pub fn to_world(&self, normalized: &[f64]) -> ActionChunk {
        let (c, a) = (self.config.chunk_len, self.config.action_dim);
        let mut chunk = ActionChunk { rows: c, cols: a, data: normalized.to_vec() };
        for r in 0..c {
            for v in &mut chunk.row_mut(r)[..a - 1] {
                *v *= self.config.action_scale;
            }
        }
        chunk
    }

    /// World chunk → normalized units; gripper mapped to `±1`.
    pub fn to_normalized(&self, chunk: &ActionChunk) -> Result<Vec<f64>> {
        if chunk.rows != self.config.chunk_len || chunk.cols != self.config.action_dim {
            return Err(Error::config("action chunk shape does not match the policy"));
        }
        let a = chunk.cols;
        let mut out = chunk.data.clone();
        for r in 0..chunk.rows {
            let row = &mut out[r * a..(r + 1) * a];
            for v in &mut row[..a - 1] {
                *v /= self.config.action_scale;
            }
            row[a - 1] = if row[a - 1] > 0.0 { 1.0 } else { -1.0 };
        }
        Ok(out)
    }

    /// Rectified-flow regression loss `mean ||v - (A^1 - eps)||^2` with
    /// caller-supplied draws; gradients for the encoder and velocity head are
    /// accumulated into their blocks.
    pub fn flow_loss_with_draws(
        &mut self,
        obs: &[f64],
        targets: &[f64],
        eps: &[f64],
        taus: &[f64],
        accumulate: bool,
    ) -> Result<f64> {
        self.weighted_flow_loss(obs, targets, eps, taus, FlowWeighting::Velocity, accumulate)
    }

    pub fn weighted_flow_loss(
        &mut self,
        obs: &[f64],
        targets: &[f64],
        eps: &[f64],
        taus: &[f64],
        weighting: FlowWeighting,
        accumulate: bool,
    ) -> Result<f64> {
        let batch = taus.len();
        let w = self.flat_action();
        let latent = self.config.latent_dim;
        if batch == 0 {
            return Err(Error::usage("flow loss needs a nonempty batch"));
        }
        if targets.len() != batch * w || eps.len() != batch * w {
            return Err(Error::config("flow loss batch shapes disagree"));
        }
        let feats = self.features_batch(obs, batch)?;
        let (z, enc_tape) = self.encoder.forward_batch(&feats, batch)?;
        let hin = self.config.head_input();
        let mut vin = Vec::with_capacity(batch * hin);
        let mut goal = Vec::with_capacity(batch * w);
        let mut noisy = Vec::with_capacity(batch * w);
        for b in 0..batch {
            let tau = taus[b];
            for i in 0..w {
                let a1 = targets[b * w + i];
                let e = eps[b * w + i];
                noisy.push(tau * a1 + (1.0 - tau) * e);
                goal.push(a1 - e);
            }
            vin.extend_from_slice(&noisy[b * w..(b + 1) * w]);
            vin.extend_from_slice(&z[b * latent..(b + 1) * latent]);
            vin.push(tau);
        }
        let (out, vel_tape) = self.velocity.forward_batch(&vin, batch)?;
        let mut pred = Vec::with_capacity(batch * w);
        for b in 0..batch {
            let r = b * w..(b + 1) * w;
            pred.extend(velocity_from_output(&out[r.clone()], &noisy[r], taus[b]));
        }
        let inv_b = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut upstream = vec![0.0; batch * w];
        for i in 0..batch * w {
            let weight = weighting.weight(taus[i / w]);
            let d = pred[i] - goal[i];
            loss += weight * d * d;
            upstream[i] = 2.0 * weight * d * inv_b;
        }
        loss *= inv_b;
        if accumulate {
            for b in 0..batch {
                let inv = 1.0 / velocity_denominator(taus[b]);
                upstream[b * w..(b + 1) * w].iter_mut().for_each(|g| *g *= inv);
            }
            let gin = self.velocity.backward(&vel_tape, &upstream)?;
            let mut gz = vec![0.0; batch * latent];
            for b in 0..batch {
                gz[b * latent..(b + 1) * latent].copy_from_slice(&gin[b * hin + w..b * hin + w + latent]);
            }
            self.encoder.accumulate_grads(&enc_tape, &gz)?;
        }
        Ok(loss)
    }

    /// Samples `ε ~ N(0, I)` and `τ ~ U(0, 1)` per record, then evaluates the
    /// flow loss and accumulates its gradients.
    pub fn flow_loss_and_grad<R: Rng + ?Sized>(
        &mut self,
        obs: &[f64],
        targets: &[f64],
        weighting: FlowWeighting,
        rng: &mut R,
    ) -> Result<f64> {
        let w = self.flat_action();
        let batch = targets.len() / w.max(1);
        let mut eps = Vec::with_capacity(batch * w);
        let mut taus = Vec::with_capacity(batch);
        for _ in 0..batch {
            for _ in 0..w {
                eps.push(rng.sample::<f64, _>(StandardNormal));
            }
            taus.push(rng.random::<f64>());
        }
        self.weighted_flow_loss(obs, targets, &eps, &taus, weighting, true)
    }

    /// Log-probabilities of recorded chains and state values for a minibatch.
    pub fn evaluate_minibatch(&self, obs: &[f64], chains: &[&DenoisingChain]) -> Result<MinibatchEval> {
        let batch = chains.len();
        if batch == 0 {
            return Err(Error::usage("empty minibatch"));
        }
        for c in chains {
            self.check_chain(c)?;
        }
        let w = self.flat_action();
        let latent = self.config.latent_dim;
        let k = self.k();
        let dt = 1.0 / k as f64;
        let (mid, half) = (self.config.log_std_mid(), self.config.log_std_half());
        let feats = self.features_batch(obs, batch)?;
        let (z, encoder) = self.encoder.forward_batch(&feats, batch)?;
        let (values, value) = self.value_head.forward_batch(&z, batch)?;
        let mut log_probs: Vec<f64> = chains.iter().map(|c| std_normal_logpdf_sum(c.chunk(0))).collect();
        let mut velocity = Vec::with_capacity(k);
        let mut noise = Vec::with_capacity(k);
        let mut residual = Vec::with_capacity(k * batch * w);
        let mut std = Vec::with_capacity(k * batch * w);
        let hin = self.config.head_input();
        for step in 0..k {
            let tau = step as f64 * dt;
            let mut xin = Vec::with_capacity(batch * hin);
            for (b, c) in chains.iter().enumerate() {
                xin.extend_from_slice(c.chunk(step));
                xin.extend_from_slice(&z[b * latent..(b + 1) * latent]);
                xin.push(tau);
            }
            let (out, vt) = self.velocity.forward_batch(&xin, batch)?;
            let (raw, nt) = self.noise.forward_batch(&xin, batch)?;
            for (b, c) in chains.iter().enumerate() {
                let a = c.chunk(step);
                let next = c.chunk(step + 1);
                let v = velocity_from_output(&out[b * w..(b + 1) * w], a, tau);
                let mean: Vec<f64> = (0..w).map(|i| a[i] + v[i] * dt).collect();
                let log_std: Vec<f64> = (0..w).map(|i| mid + half * raw[b * w + i]).collect();
                log_probs[b] += gaussian_logpdf_sum(next, &mean, &log_std);
                for i in 0..w {
                    residual.push(next[i] - mean[i]);
                    std.push(log_std[i].exp());
                }
            }
            velocity.push(vt);
            noise.push(nt);
        }
        Ok(MinibatchEval {
            log_probs,
            values: values.clone(),
            tape: MinibatchTape { batch, encoder, velocity, noise, value, residual, std },
        })
    }

    /// Accumulates gradients of `Σ_b dlogp[b]·logp_b + dvalue[b]·V_b`.
    ///
    /// Encoder gradients arrive only through the velocity head's conditioning.
    pub fn backward_minibatch(
        &mut self,
        tape: &MinibatchTape,
        dlogp: &[f64],
        dvalue: &[f64],
        train_encoder: bool,
    ) -> Result<()> {
        let batch = tape.batch;
        if dlogp.len() != batch || dvalue.len() != batch {
            return Err(Error::usage("upstream gradients do not match the minibatch"));
        }
        let w = self.flat_action();
        let latent = self.config.latent_dim;
        let hin = self.config.head_input();
        let dt = 1.0 / self.k() as f64;
        let half = self.config.log_std_half();
        self.value_head.accumulate_grads(&tape.value, dvalue)?;
        let mut gz = vec![0.0; batch * latent];
        for step in 0..tape.velocity.len() {
            let inv_den = 1.0 / velocity_denominator(step as f64 * dt);
            let mut gv = vec![0.0; batch * w];
            let mut graw = vec![0.0; batch * w];
            for b in 0..batch {
                let g = dlogp[b];
                for i in 0..w {
                    let j = (step * batch + b) * w + i;
                    let (r, s) = (tape.residual[j], tape.std[j]);
                    let u = r / s;
                    gv[b * w + i] = g * (r / (s * s)) * dt * inv_den;
                    graw[b * w + i] = g * (u * u - 1.0) * half;
                }
            }
            self.noise.accumulate_grads(&tape.noise[step], &graw)?;
            if train_encoder {
                let gin = self.velocity.backward(&tape.velocity[step], &gv)?;
                for b in 0..batch {
                    for i in 0..latent {
                        gz[b * latent + i] += gin[b * hin + w + i];
                    }
                }
            } else {
                self.velocity.accumulate_grads(&tape.velocity[step], &gv)?;
            }
        }
        if train_encoder {
            self.encoder.accumulate_grads(&tape.encoder, &gz)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.velocity.zero_grad();
        self.noise.zero_grad();
        self.value_head.zero_grad();
    }

    /// All blocks in a fixed order: encoder, velocity, noise, value.
    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.encoder
            .blocks()
            .iter()
            .chain(self.velocity.blocks())
            .chain(self.noise.blocks())
            .chain(self.value_head.blocks())
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v: Vec<&mut ParamBlock> = Vec::new();
        v.extend(self.encoder.blocks_mut().iter_mut());
        v.extend(self.velocity.blocks_mut().iter_mut());
        v.extend(self.noise.blocks_mut().iter_mut());
        v.extend(self.value_head.blocks_mut().iter_mut());
        v
    }

    /// Encoder and velocity head only; the parameters imitation updates.
    pub fn imitation_blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v: Vec<&mut ParamBlock> = Vec::new();
        v.extend(self.encoder.blocks_mut().iter_mut());
        v.extend(self.velocity.blocks_mut().iter_mut());
        v
    }
}

/// Floor on `1 - τ` in the velocity parameterization.
pub const TAU_FLOOR: f64 = 0.01;

pub const GROUNDING_WIDTH: usize = 12;

/// Encoder input width for `config` and `layout`.
pub fn feature_width(config: &PolicyConfig, layout: &ObsLayout) -> usize {
    layout.width() + if config.grounding_temperature > 0.0 { GROUNDING_WIDTH } else { 0 }
}

/// Parameter-free referent grounding. Each instruction descriptor attends
/// over the present slots with weights `softmax(-|d_slot - d_instr|^2 / T)`;
/// the block holds the attended target and destination positions and the
/// gripper's offsets to them, all in normalized feature units.
pub fn grounding_features(flat_obs: &[f64], lay: &ObsLayout, temperature: f64) -> Vec<f64> {
    let d = lay.descriptor_dim;
    let sw = lay.slot_width();
    let norm = |p: &[f64]| -> [f64; 3] { std::array::from_fn(|i| (p[i] - FEATURE_CENTER[i]) / FEATURE_SCALE) };
    let gripper = norm(&flat_obs[0..3]);
    let mut out = Vec::with_capacity(GROUNDING_WIDTH);
    let mut offsets = Vec::with_capacity(6);
    for r in 0..2 {
        let query = &flat_obs[lay.instruction_offset() + r * d..lay.instruction_offset() + (r + 1) * d];
        let scores: Vec<Option<f64>> = (0..lay.max_objects)
            .map(|s| {
                let o = lay.slots_offset() + s * sw;
                (flat_obs[o + sw - 1] != 0.0).then(|| {
                    -(0..d).map(|i| (flat_obs[o + 3 + i] - query[i]).powi(2)).sum::<f64>() / temperature
                })
            })
            .collect();
        let top = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut pos = [0.0; 3];
        if top.is_finite() {
            let mut total = 0.0;
            for (s, sc) in scores.iter().enumerate() {
                if let Some(sc) = sc {
                    let w = (sc - top).exp();
                    let p = norm(&flat_obs[lay.slots_offset() + s * sw..]);
                    (0..3).for_each(|i| pos[i] += w * p[i]);
                    total += w;
                }
            }
            pos.iter_mut().for_each(|p| *p /= total);
        }
        out.extend_from_slice(&pos);
        offsets.extend((0..3).map(|i| gripper[i] - pos[i]));
    }
    out.extend(offsets);
    out
}

/// Per-sample weight of the velocity regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowWeighting {
    /// Unweighted velocity error.
    Velocity,
    /// Velocity error times `max(1 - tau, floor)^2`, i.e. the squared error of
    /// the clean-chunk estimate.
    #[default]
    CleanChunk,
}

impl FlowWeighting {
    pub fn weight(self, tau: f64) -> f64 {
        match self {
            FlowWeighting::Velocity => 1.0,
            FlowWeighting::CleanChunk => velocity_denominator(tau).powi(2),
        }
    }
}

pub fn velocity_denominator(tau: f64) -> f64 {
    (1.0 - tau).max(TAU_FLOOR)
}

/// The velocity head outputs a clean-chunk estimate `D`; the field is
/// `(D - A^τ) / max(1 - τ, TAU_FLOOR)`.
pub fn velocity_from_output(out: &[f64], a: &[f64], tau: f64) -> Vec<f64> {
    let inv = 1.0 / velocity_denominator(tau);
    out.iter().zip(a).map(|(d, x)| (d - x) * inv).collect()
}

/// Independent density of a single Gaussian entry, used by tests and oracles.
pub fn normal_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    let u = (x - mean) / std;
    -0.5 * u * u - std.ln() - 0.5 * (2.0 * PI).ln()
}
