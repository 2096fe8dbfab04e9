//! Expert demonstrations and flow-matching pretraining.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_file, write_atomic};
use crate::autodiff::{adam_step, clip_block_grads, AdamConfig, OptimizerState};
use crate::container::{Container, NamedArray};
use crate::error::{Error, Result};
use crate::policy::{FlowPolicy, FlowWeighting};
use crate::rng::{derive_seed, stream};
use crate::scenes::SceneSpec;
use crate::world::{reset, scripted_expert, step_chunk, DomainRandomizationConfig, WorldConfig};

pub const DEMO_MAGIC: &[u8; 8] = b"FLWDEMO\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    /// Position of the scene in the list passed to [`generate_demos`].
    pub scene: usize,
    pub scene_id: String,
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub corpus_seed: u64,
    pub scene_ids: Vec<String>,
    pub episodes_per_scene: usize,
    pub seed: u64,
    pub records: usize,
    pub obs_width: usize,
    pub chunk_rows: usize,
    pub chunk_cols: usize,
    pub failed_episodes: usize,
    /// Every rolled episode, successful or not; only successful ones
    /// contribute records, in this order.
    pub episodes: Vec<DemoEpisode>,
}

/// Flat (observation, expert chunk) pairs. Chunks are in world units.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub manifest: DemoManifest,
    pub observations: Vec<f64>,
    pub chunks: Vec<f64>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.manifest.records
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records == 0
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        let w = self.manifest.obs_width;
        &self.observations[i * w..(i + 1) * w]
    }

    pub fn chunk(&self, i: usize) -> &[f64] {
        let w = self.manifest.chunk_rows * self.manifest.chunk_cols;
        &self.chunks[i * w..(i + 1) * w]
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let m = &self.manifest;
        let container = Container {
            header: serde_json::to_string(m)?,
            arrays: vec![
                NamedArray {
                    name: "observations".into(),
                    rows: m.records,
                    cols: m.obs_width,
                    values: self.observations.clone(),
                },
                NamedArray {
                    name: "chunks".into(),
                    rows: m.records,
                    cols: m.chunk_rows * m.chunk_cols,
                    values: self.chunks.clone(),
                },
            ],
        };
        Ok(container.encode(DEMO_MAGIC))
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let c = Container::decode(bytes, DEMO_MAGIC, path)?;
        let manifest: DemoManifest = serde_json::from_str(&c.header)
            .map_err(|e| Error::Format { path: path.into(), message: format!("bad demo manifest: {e}") })?;
        let get = |name: &str, cols: usize| -> Result<Vec<f64>> {
            let a = c
                .get(name)
                .ok_or_else(|| Error::Format { path: path.into(), message: format!("missing array {name}") })?;
            if a.rows != manifest.records || a.cols != cols {
                return Err(Error::Format { path: path.into(), message: format!("array {name} has the wrong shape") });
            }
            Ok(a.values.clone())
        };
        let observations = get("observations", manifest.obs_width)?;
        let chunks = get("chunks", manifest.chunk_rows * manifest.chunk_cols)?;
        Ok(DemoSet { manifest, observations, chunks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub episodes_per_scene: usize,
    /// Expert failure rate above which the world is considered misconfigured.
    pub max_failure_rate: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { episodes_per_scene: 8, max_failure_rate: 0.05 }
    }
}

struct EpisodeData {
    info: DemoEpisode,
    observations: Vec<f64>,
    chunks: Vec<f64>,
}

/// Seed of episode `episode` on scene position `scene`.
pub fn episode_seed(seed: u64, scene: usize, episode: usize) -> u64 {
    derive_seed(seed, "demo-episode", ((scene as u64) << 32) | episode as u64)
}

fn roll_expert(
    scene: &Arc<SceneSpec>,
    world: &Arc<WorldConfig>,
    dr: &DomainRandomizationConfig,
    info: DemoEpisode,
) -> Result<EpisodeData> {
    let (mut state, mut obs) = reset(scene.clone(), world.clone(), dr, stream(info.seed, "env", 0))?;
    let mut observations = Vec::new();
    let mut chunks = Vec::new();
    let mut steps = 0;
    while !state.done {
        let chunk = scripted_expert(&state);
        observations.extend(obs.flatten(&world.layout)?);
        chunks.extend_from_slice(&chunk.data);
        let r = step_chunk(&mut state, &chunk)?;
        obs = r.observation;
        steps += 1;
    }
    Ok(EpisodeData { info: DemoEpisode { steps, success: state.success, ..info }, observations, chunks })
}

/// Rolls the scripted expert with randomization on and keeps the successful
/// episodes. Fails when the expert's failure rate exceeds the configured cap.
pub fn generate_demos(
    scenes: &[SceneSpec],
    corpus_seed: u64,
    world: &WorldConfig,
    dr: &DomainRandomizationConfig,
    cfg: &DemoConfig,
    seed: u64,
) -> Result<DemoSet> {
    if scenes.is_empty() {
        return Err(Error::config("demo generation needs at least one scene"));
    }
    let world = Arc::new(world.clone());
    let shared: Vec<Arc<SceneSpec>> = scenes.iter().map(|s| Arc::new(s.clone())).collect();
    let jobs: Vec<(usize, usize)> =
        (0..scenes.len()).flat_map(|s| (0..cfg.episodes_per_scene).map(move |e| (s, e))).collect();
    let episodes: Vec<EpisodeData> = jobs
        .par_iter()
        .map(|&(s, e)| {
            let info = DemoEpisode {
                scene: s,
                scene_id: scenes[s].scene_id.clone(),
                episode: e,
                seed: episode_seed(seed, s, e),
                steps: 0,
                success: false,
            };
            roll_expert(&shared[s], &world, dr, info)
        })
        .collect::<Result<_>>()?;
    let total = episodes.len();
    let failed = episodes.iter().filter(|e| !e.info.success).count();
    if total > 0 && failed as f64 > cfg.max_failure_rate * total as f64 {
        return Err(Error::ExpertFailure { failed, total });
    }
    let mut observations = Vec::new();
    let mut chunks = Vec::new();
    let mut records = 0;
    for e in episodes.iter().filter(|e| e.info.success) {
        observations.extend_from_slice(&e.observations);
        chunks.extend_from_slice(&e.chunks);
        records += e.info.steps;
    }
    Ok(DemoSet {
        manifest: DemoManifest {
            corpus_seed,
            scene_ids: scenes.iter().map(|s| s.scene_id.clone()).collect(),
            episodes_per_scene: cfg.episodes_per_scene,
            seed,
            records,
            obs_width: world.layout.width(),
            chunk_rows: world.chunk_len,
            chunk_cols: world.action_dim,
            failed_episodes: failed,
            episodes: episodes.into_iter().map(|e| e.info).collect(),
        },
        observations,
        chunks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Set from the lab's master seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub weighting: FlowWeighting,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 64,
            steps: 500,
            lr: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            weighting: FlowWeighting::CleanChunk,
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

/// Minibatch record indices for `step`: uniform with replacement.
pub fn pretrain_batch(cfg: &PretrainConfig, records: usize, step: usize) -> Vec<usize> {
    let mut rng = stream(cfg.seed, "pretrain-batch", step as u64);
    (0..cfg.batch_size).map(|_| rng.random_range(0..records)).collect()
}

/// Gathers observations and normalized targets for `indices`.
pub fn gather_batch(policy: &FlowPolicy, demos: &DemoSet, indices: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut obs = Vec::with_capacity(indices.len() * demos.manifest.obs_width);
    let mut targets = Vec::with_capacity(indices.len() * policy.flat_action());
    let (rows, cols) = (demos.manifest.chunk_rows, demos.manifest.chunk_cols);
    for &i in indices {
        obs.extend_from_slice(demos.observation(i));
        let chunk = crate::spaces::ActionChunk { rows, cols, data: demos.chunk(i).to_vec() };
        targets.extend(policy.to_normalized(&chunk)?);
    }
    Ok((obs, targets))
}

/// Trains the encoder and velocity head on the rectified-flow objective.
/// The noise and value heads are untouched.
pub fn pretrain(policy: &mut FlowPolicy, demos: &DemoSet, cfg: &PretrainConfig) -> Result<PretrainLog> {
    if demos.is_empty() {
        return Err(Error::config("pretraining needs a nonempty demo set"));
    }
    if demos.manifest.obs_width != policy.layout.width()
        || demos.manifest.chunk_rows * demos.manifest.chunk_cols != policy.flat_action()
    {
        return Err(Error::config("demo set dimensions do not match the policy"));
    }
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut opt = OptimizerState::for_blocks(policy.imitation_blocks_mut().into_iter().map(|b| &*b));
    let mut log = PretrainLog::default();
    for step in 0..cfg.steps {
        let idx = pretrain_batch(cfg, demos.len(), step);
        let (obs, targets) = gather_batch(policy, demos, &idx)?;
        policy.zero_grad();
        let mut draws = stream(cfg.seed, "pretrain-draws", step as u64);
        let loss = policy.flow_loss_and_grad(&obs, &targets, cfg.weighting, &mut draws)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { location: format!("pretrain step {step}"), detail: format!("loss {loss}") });
        }
        let mut blocks = policy.imitation_blocks_mut();
        clip_block_grads(&mut blocks, cfg.grad_clip);
        adam_step(&mut blocks, &mut opt, &adam)
            .map_err(|e| Error::Divergence { location: format!("pretrain step {step}"), detail: e.to_string() })?;
        log.losses.push(loss);
    }
    Ok(log)
}
