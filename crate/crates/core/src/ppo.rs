//! PPO fine-tuning over denoising chains.
//!
//! Each decision step stores the full noise-injected chain so its joint
//! log-density can be recomputed under updated parameters. The importance
//! ratio is power-scaled, `exp(s * (logp_new - logp_old))`, before the usual
//! clipped surrogate.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_block_grads, AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::policy::{DenoisingChain, FlowPolicy};
use crate::rng::{derive_seed, stream, LabRng};
use crate::scenes::SceneSpec;
use crate::spaces::ObservationVector;
use crate::world::{reset, step_chunk, DomainRandomizationConfig, EnvState, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub minibatch_size: usize,
    /// Passes over each collected batch.
    pub update_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    /// Exponent `s` of the scaled importance ratio.
    pub ratio_scale: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    /// Integration steps `K` used while fine-tuning.
    pub k: usize,
    pub iterations: usize,
    /// Set from the lab's master seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub freeze_encoder: bool,
    /// When nonzero, the batch grows with the scene count: `num_envs` becomes
    /// `envs_per_scene * scenes` and the minibatch keeps the same share of it.
    pub envs_per_scene: usize,
    pub checkpoint_every: usize,
    /// Write measured wall time into the curve; off keeps curves byte-stable.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_envs: 64,
            steps_per_env: 25,
            minibatch_size: 160,
            update_epochs: 1,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            ratio_scale: 0.2,
            lr: 1e-4,
            grad_clip: 0.5,
            value_coef: 0.5,
            normalize_advantages: true,
            k: 1,
            iterations: 200,
            seed: 0,
            freeze_encoder: false,
            envs_per_scene: 0,
            checkpoint_every: 50,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// `(num_envs, minibatch_size)` after applying the per-scene batch knob.
    pub fn effective_batch(&self, scenes: usize) -> (usize, usize) {
        if self.envs_per_scene == 0 {
            return (self.num_envs, self.minibatch_size);
        }
        let envs = self.envs_per_scene * scenes.max(1);
        let share = self.minibatch_size as f64 / (self.num_envs * self.steps_per_env) as f64;
        let mb = ((envs * self.steps_per_env) as f64 * share).round().max(1.0) as usize;
        (envs, mb)
    }

    pub fn validate(&self, scenes: usize) -> Result<()> {
        let (envs, mb) = self.effective_batch(scenes);
        let batch = envs * self.steps_per_env;
        if batch == 0 || mb == 0 || batch % mb != 0 {
            return Err(Error::config(format!("minibatch size {mb} must divide the batch of {batch} decisions")));
        }
        if !(self.ratio_scale > 0.0 && self.ratio_scale <= 1.0) {
            return Err(Error::config("ratio scale s must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) || self.clip_eps <= 0.0 {
            return Err(Error::config("gamma and lambda must lie in [0, 1] and clip epsilon be positive"));
        }
        if self.k == 0 || self.update_epochs == 0 {
            return Err(Error::config("K and update epochs must be positive"));
        }
        Ok(())
    }
}

/// Vectorized environments with auto-reset. Every env owns its world stream
/// and policy-noise stream, so stepping order does not affect results.
pub struct VecEnv {
    pub states: Vec<EnvState>,
    pub observations: Vec<ObservationVector>,
    scenes: Vec<Arc<SceneSpec>>,
    world: Arc<WorldConfig>,
    dr: DomainRandomizationConfig,
    seed: u64,
    episodes: Vec<u64>,
    policy_rngs: Vec<LabRng>,
}

/// Episodes finished during a collection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub successes: usize,
    pub total_return: f64,
}

impl EpisodeStats {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            f64::NAN
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes == 0 {
            f64::NAN
        } else {
            self.total_return / self.episodes as f64
        }
    }
}

fn reset_env(
    scenes: &[Arc<SceneSpec>],
    world: &Arc<WorldConfig>,
    dr: &DomainRandomizationConfig,
    seed: u64,
    env: usize,
    episode: u64,
) -> Result<(EnvState, ObservationVector)> {
    let key = ((env as u64) << 32) | episode;
    let mut pick = stream(seed, "scene-pick", key);
    let scene = scenes[pick.random_range(0..scenes.len())].clone();
    reset(scene, world.clone(), dr, stream(seed, "env", key))
}

impl VecEnv {
    pub fn new(
        scenes: &[SceneSpec],
        world: &WorldConfig,
        dr: &DomainRandomizationConfig,
        num_envs: usize,
        seed: u64,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::config("training needs at least one scene"));
        }
        let scenes: Vec<Arc<SceneSpec>> = scenes.iter().map(|s| Arc::new(s.clone())).collect();
        let world = Arc::new(world.clone());
        let mut states = Vec::with_capacity(num_envs);
        let mut observations = Vec::with_capacity(num_envs);
        for e in 0..num_envs {
            let (s, o) = reset_env(&scenes, &world, dr, seed, e, 0)
                .map_err(|err| Error::Env { index: e, source: Box::new(err) })?;
            states.push(s);
            observations.push(o);
        }
        let policy_rngs = (0..num_envs).map(|e| stream(seed, "policy-noise", e as u64)).collect();
        Ok(VecEnv {
            states,
            observations,
            scenes,
            world,
            dr: dr.clone(),
            seed,
            episodes: vec![0; num_envs],
            policy_rngs,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Decision records in env-major, time-minor order: record `e * steps + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub steps: usize,
    pub obs_width: usize,
    pub observations: Vec<f64>,
    pub chains: Vec<DenoisingChain>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the observation after each env's last step.
    pub bootstrap_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub stats: EpisodeStats,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_width..(i + 1) * self.obs_width]
    }
}

struct EnvTrajectory {
    observations: Vec<f64>,
    chains: Vec<DenoisingChain>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    bootstrap: f64,
    stats: EpisodeStats,
}

/// Runs `steps` decisions in every env with the stochastic sampler.
pub fn collect_rollouts(policy: &FlowPolicy, venv: &mut VecEnv, steps: usize) -> Result<RolloutBatch> {
    let layout = policy.layout;
    if venv.world.layout != layout
        || venv.world.chunk_len != policy.config.chunk_len
        || venv.world.action_dim != policy.config.action_dim
    {
        return Err(Error::config("policy and world dimensions disagree"));
    }
    let VecEnv { states, observations, scenes, world, dr, seed, episodes, policy_rngs } = venv;
    let trajectories: Vec<EnvTrajectory> = states
        .par_iter_mut()
        .zip(observations.par_iter_mut())
        .zip(episodes.par_iter_mut())
        .zip(policy_rngs.par_iter_mut())
        .enumerate()
        .map(|(e, (((state, obs), episode), rng))| {
            let mut run = || -> Result<EnvTrajectory> {
                let mut tr = EnvTrajectory {
                    observations: Vec::with_capacity(steps * layout.width()),
                    chains: Vec::with_capacity(steps),
                    rewards: Vec::with_capacity(steps),
                    values: Vec::with_capacity(steps),
                    dones: Vec::with_capacity(steps),
                    bootstrap: 0.0,
                    stats: EpisodeStats::default(),
                };
                for _ in 0..steps {
                    let flat = obs.flatten(&layout)?;
                    let z = policy.encode_flat(&flat)?;
                    let chain = policy.sample_stochastic(&z, rng)?;
                    let value = policy.value(&z)?;
                    let chunk = policy.to_world(chain.action());
                    let r = step_chunk(state, &chunk)?;
                    tr.observations.extend(flat);
                    tr.chains.push(chain);
                    tr.rewards.push(r.reward);
                    tr.values.push(value);
                    tr.dones.push(r.done);
                    if r.done {
                        tr.stats.episodes += 1;
                        tr.stats.successes += r.info.success as usize;
                        tr.stats.total_return += r.reward;
                        *episode += 1;
                        let (s, o) = reset_env(scenes, world, dr, *seed, e, *episode)?;
                        *state = s;
                        *obs = o;
                    } else {
                        *obs = r.observation;
                    }
                }
                tr.bootstrap = policy.value(&policy.encode(obs)?)?;
                Ok(tr)
            };
            run().map_err(|err| Error::Env { index: e, source: Box::new(err) })
        })
        .collect::<Result<_>>()?;

    let n = trajectories.len() * steps;
    let mut batch = RolloutBatch {
        num_envs: trajectories.len(),
        steps,
        obs_width: layout.width(),
        observations: Vec::with_capacity(n * layout.width()),
        chains: Vec::with_capacity(n),
        old_log_probs: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        bootstrap_values: Vec::with_capacity(trajectories.len()),
        advantages: Vec::new(),
        returns: Vec::new(),
        stats: EpisodeStats::default(),
    };
    for tr in trajectories {
        batch.observations.extend(tr.observations);
        batch.old_log_probs.extend(tr.chains.iter().map(|c| c.log_prob));
        batch.chains.extend(tr.chains);
        batch.rewards.extend(tr.rewards);
        batch.values.extend(tr.values);
        batch.dones.extend(tr.dones);
        batch.bootstrap_values.push(tr.bootstrap);
        batch.stats.episodes += tr.stats.episodes;
        batch.stats.successes += tr.stats.successes;
        batch.stats.total_return += tr.stats.total_return;
    }
    Ok(batch)
}

/// Generalized advantage estimation over one env's sequence.
/// `last_value` bootstraps the step after the final record unless it is done.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::usage(format!(
            "GAE inputs disagree: {} rewards, {} values, {} done flags",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Fills advantages and returns per env and normalizes advantages if asked.
pub fn finish_batch(batch: &mut RolloutBatch, cfg: &TrainConfig) -> Result<()> {
    let (n, t) = (batch.num_envs, batch.steps);
    let mut adv = Vec::with_capacity(n * t);
    let mut ret = Vec::with_capacity(n * t);
    for e in 0..n {
        let r = e * t..(e + 1) * t;
        let (a, g) = compute_gae(
            &batch.rewards[r.clone()],
            &batch.values[r.clone()],
            &batch.dones[r],
            batch.bootstrap_values[e],
            cfg.gamma,
            cfg.gae_lambda,
        )?;
        adv.extend(a);
        ret.extend(g);
    }
    if cfg.normalize_advantages {
        normalize_advantages(&mut adv);
    }
    if let Some(i) = adv.iter().position(|a| !a.is_finite()) {
        return Err(Error::Divergence { location: format!("advantage {i}"), detail: "non-finite advantage".into() });
    }
    batch.advantages = adv;
    batch.returns = ret;
    Ok(())
}

/// `exp(s * (logp_new - logp_old))`, formed in log space.
pub fn scaled_ratio(logp_new: f64, logp_old: f64, s: f64) -> Result<f64> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(Error::Divergence {
            location: "importance ratio".into(),
            detail: format!("non-finite log-probability ({logp_new}, {logp_old})"),
        });
    }
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::config("ratio scale s must lie in (0, 1]"));
    }
    Ok((s * (logp_new - logp_old)).exp())
}

/// Per-record clipped surrogate `min(r A, clip(r, 1-ε, 1+ε) A)` and its
/// derivative with respect to `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let unclipped_obj = ratio * advantage;
    let clipped_obj = clipped * advantage;
    if unclipped_obj <= clipped_obj {
        (unclipped_obj, advantage)
    } else {
        (clipped_obj, 0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Global gradient norm before clipping, averaged over minibatches.
    pub grad_norm: f64,
}

/// Loss terms and upstream gradients of one minibatch, without touching
/// parameters.
pub struct MinibatchLoss {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub ratios: Vec<f64>,
    pub dlogp: Vec<f64>,
    pub dvalue: Vec<f64>,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

pub fn minibatch_loss(
    log_probs: &[f64],
    values: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &TrainConfig,
) -> Result<MinibatchLoss> {
    let b = log_probs.len();
    let inv = 1.0 / b as f64;
    let mut out = MinibatchLoss {
        policy_loss: 0.0,
        value_loss: 0.0,
        ratios: Vec::with_capacity(b),
        dlogp: Vec::with_capacity(b),
        dvalue: Vec::with_capacity(b),
        clip_fraction: 0.0,
        approx_kl: 0.0,
    };
    for i in 0..b {
        let r = scaled_ratio(log_probs[i], old_log_probs[i], cfg.ratio_scale)?;
        let (obj, dobj_dr) = clipped_surrogate(r, advantages[i], cfg.clip_eps);
        out.policy_loss -= obj * inv;
        // d r / d logp = s r
        out.dlogp.push(-dobj_dr * cfg.ratio_scale * r * inv);
        let dv = values[i] - returns[i];
        out.value_loss += dv * dv * inv;
        out.dvalue.push(cfg.value_coef * 2.0 * dv * inv);
        if (r - 1.0).abs() > cfg.clip_eps {
            out.clip_fraction += inv;
        }
        let d = log_probs[i] - old_log_probs[i];
        out.approx_kl += (d.exp() - 1.0 - d) * inv;
        out.ratios.push(r);
    }
    Ok(out)
}

pub struct PpoOptimizer {
    pub adam: AdamConfig,
    pub state: OptimizerState,
}

impl PpoOptimizer {
    pub fn new(policy: &FlowPolicy, lr: f64) -> Self {
        PpoOptimizer { adam: AdamConfig { lr, ..AdamConfig::default() }, state: OptimizerState::for_blocks(policy.blocks()) }
    }
}

/// One pass (per update epoch) over the batch in shuffled minibatches.
pub fn ppoflow_update(
    policy: &mut FlowPolicy,
    opt: &mut PpoOptimizer,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    mb_size: usize,
    iteration: usize,
) -> Result<UpdateMetrics> {
    let n = batch.len();
    if batch.advantages.len() != n || batch.returns.len() != n {
        return Err(Error::usage("advantages must be computed before the update"));
    }
    if mb_size == 0 || n % mb_size != 0 {
        return Err(Error::config(format!("minibatch size {mb_size} must divide the batch of {n}")));
    }
    let mut metrics = UpdateMetrics::default();
    let mut count = 0usize;
    for epoch in 0..cfg.update_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let key = (iteration as u64) << 16 | epoch as u64;
        order.shuffle(&mut stream(cfg.seed, "minibatch-order", key));
        for (m, idx) in order.chunks(mb_size).enumerate() {
            let obs: Vec<f64> = idx.iter().flat_map(|&i| batch.observation(i).iter().copied()).collect();
            let chains: Vec<&DenoisingChain> = idx.iter().map(|&i| &batch.chains[i]).collect();
            let eval = policy.evaluate_minibatch(&obs, &chains)?;
            let pick = |v: &[f64]| -> Vec<f64> { idx.iter().map(|&i| v[i]).collect() };
            let loss = minibatch_loss(
                &eval.log_probs,
                &eval.values,
                &pick(&batch.old_log_probs),
                &pick(&batch.advantages),
                &pick(&batch.returns),
                cfg,
            )?;
            let total = loss.policy_loss + cfg.value_coef * loss.value_loss;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    location: format!("iteration {iteration}, epoch {epoch}, minibatch {m}"),
                    detail: format!("policy loss {}, value loss {}", loss.policy_loss, loss.value_loss),
                });
            }
            policy.zero_grad();
            policy.backward_minibatch(&eval.tape, &loss.dlogp, &loss.dvalue, !cfg.freeze_encoder)?;
            let mut blocks = policy.blocks_mut();
            let norm = clip_block_grads(&mut blocks, cfg.grad_clip);
            adam_step(&mut blocks, &mut opt.state, &opt.adam).map_err(|e| Error::Divergence {
                location: format!("iteration {iteration}, epoch {epoch}, minibatch {m}"),
                detail: e.to_string(),
            })?;
            metrics.policy_loss += loss.policy_loss;
            metrics.value_loss += loss.value_loss;
            metrics.clip_fraction += loss.clip_fraction;
            metrics.approx_kl += loss.approx_kl;
            metrics.grad_norm += norm;
            count += 1;
        }
    }
    let c = count as f64;
    metrics.policy_loss /= c;
    metrics.value_loss /= c;
    metrics.clip_fraction /= c;
    metrics.approx_kl /= c;
    metrics.grad_norm /= c;
    Ok(metrics)
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub wall_seconds: f64,
}

pub const CURVE_HEADER: [&str; 10] = [
    "iteration",
    "env_steps",
    "success_rate",
    "mean_return",
    "policy_loss",
    "value_loss",
    "clip_fraction",
    "approx_kl",
    "grad_norm",
    "wall_seconds",
];

pub struct TrainOutcome {
    pub policy: FlowPolicy,
    pub curve: Vec<CurveRow>,
}

/// Collect, estimate advantages, update; repeated for `cfg.iterations`.
/// `on_checkpoint` receives the policy after every `checkpoint_every`
/// iterations.
pub fn train(
    cfg: &TrainConfig,
    init: &FlowPolicy,
    scenes: &[SceneSpec],
    world: &WorldConfig,
    dr: &DomainRandomizationConfig,
    mut on_checkpoint: impl FnMut(usize, &FlowPolicy) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate(scenes.len())?;
    let (num_envs, mb_size) = cfg.effective_batch(scenes.len());
    let mut policy = init.clone();
    policy.set_k(cfg.k)?;
    let mut opt = PpoOptimizer::new(&policy, cfg.lr);
    let env_seed = derive_seed(cfg.seed, "train-envs", 0);
    let mut venv = VecEnv::new(scenes, world, dr, num_envs, env_seed)?;
    let start = Instant::now();
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut batch = collect_rollouts(&policy, &mut venv, cfg.steps_per_env)?;
        finish_batch(&mut batch, cfg)?;
        let m = ppoflow_update(&mut policy, &mut opt, &batch, cfg, mb_size, it)?;
        curve.push(CurveRow {
            iteration: it + 1,
            env_steps: (it + 1) * num_envs * cfg.steps_per_env,
            success_rate: batch.stats.success_rate(),
            mean_return: batch.stats.mean_return(),
            policy_loss: m.policy_loss,
            value_loss: m.value_loss,
            clip_fraction: m.clip_fraction,
            approx_kl: m.approx_kl,
            grad_norm: m.grad_norm,
            wall_seconds: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        });
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, &policy)?;
        }
    }
    Ok(TrainOutcome { policy, curve })
}
