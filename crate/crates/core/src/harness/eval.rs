//! Success rate and time-to-finish over fixed scene sets.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::FlowPolicy;
use crate::rng::{derive_seed, stream, LabRng};
use crate::scenes::SceneSpec;
use crate::spaces::{ActionChunk, ObservationVector};
use crate::world::{reset, scripted_expert, step_chunk, DomainRandomizationConfig, EnvState, WorldConfig};

/// Anything that maps the current state to an action chunk.
pub trait Controller: Sync {
    fn act(&self, state: &EnvState, obs: &ObservationVector, rng: &mut LabRng) -> Result<ActionChunk>;

    fn check(&self, _world: &WorldConfig) -> Result<()> {
        Ok(())
    }
}

/// Deterministic Euler sampling; the noise head is not used.
pub struct OdePolicy<'a>(pub &'a FlowPolicy);

impl Controller for OdePolicy<'_> {
    fn act(&self, _state: &EnvState, obs: &ObservationVector, rng: &mut LabRng) -> Result<ActionChunk> {
        let z = self.0.encode(obs)?;
        Ok(self.0.to_world(&self.0.sample_ode(&z, rng)?))
    }

    fn check(&self, world: &WorldConfig) -> Result<()> {
        let p = self.0;
        if p.layout != world.layout || p.config.chunk_len != world.chunk_len || p.config.action_dim != world.action_dim {
            return Err(Error::config(format!(
                "checkpoint expects chunks of {}x{} and {} observation features; world uses {}x{} and {}",
                p.config.chunk_len,
                p.config.action_dim,
                p.layout.width(),
                world.chunk_len,
                world.action_dim,
                world.layout.width()
            )));
        }
        Ok(())
    }
}

pub struct ScriptedExpert;

impl Controller for ScriptedExpert {
    fn act(&self, state: &EnvState, _obs: &ObservationVector, _rng: &mut LabRng) -> Result<ActionChunk> {
        Ok(scripted_expert(state))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean simulated seconds to success; `None` without successes.
    pub mean_tf: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_tf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub episodes_per_scene: usize,
    pub scenes: Vec<SceneEval>,
}

impl EvalReport {
    /// Episode-weighted aggregate over `ids`; unknown ids are an error.
    pub fn aggregate(&self, ids: &[String]) -> Result<Aggregate> {
        let by_id: BTreeMap<&str, &SceneEval> = self.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
        let rows = ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::usage(format!("scene {id} was not evaluated"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(aggregate_rows(&rows))
    }

    pub fn overall(&self) -> Aggregate {
        aggregate_rows(&self.scenes.iter().collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

fn aggregate_rows(rows: &[&SceneEval]) -> Aggregate {
    let episodes: usize = rows.iter().map(|r| r.episodes).sum();
    let successes: usize = rows.iter().map(|r| r.successes).sum();
    let tf_total: f64 = rows.iter().filter_map(|r| r.mean_tf.map(|t| t * r.successes as f64)).sum();
    Aggregate {
        episodes,
        successes,
        success_rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
        mean_tf: (successes > 0).then(|| tf_total / successes as f64),
    }
}

/// Outcome of one episode: `Some(seconds)` on success.
pub fn run_episode(
    controller: &dyn Controller,
    scene: Arc<SceneSpec>,
    world: Arc<WorldConfig>,
    dr: &DomainRandomizationConfig,
    seed: u64,
    episode: u64,
) -> Result<Option<f64>> {
    let hz = world.control_hz;
    let key = derive_seed(seed, &scene.scene_id, episode);
    let (mut state, mut obs) = reset(scene, world, dr, stream(key, "env", 0))?;
    let mut rng = stream(key, "policy", 0);
    loop {
        let chunk = controller.act(&state, &obs, &mut rng)?;
        let r = step_chunk(&mut state, &chunk)?;
        if r.done {
            return Ok(r.info.success.then(|| r.info.low_steps as f64 / hz));
        }
        obs = r.observation;
    }
}

/// Runs `episodes_per_scene` episodes on every scene. Each episode's streams
/// depend only on `(seed, scene_id, episode)`, so a scene scores the same
/// regardless of which set it is evaluated in.
pub fn evaluate(
    controller: &dyn Controller,
    scenes: &[SceneSpec],
    world: &WorldConfig,
    dr: &DomainRandomizationConfig,
    episodes_per_scene: usize,
    seed: u64,
) -> Result<EvalReport> {
    controller.check(world)?;
    let world = Arc::new(world.clone());
    let scenes: Vec<Arc<SceneSpec>> = scenes.iter().map(|s| Arc::new(s.clone())).collect();
    let jobs: Vec<(usize, u64)> =
        (0..scenes.len()).flat_map(|s| (0..episodes_per_scene as u64).map(move |e| (s, e))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(s, e)| run_episode(controller, scenes[s].clone(), world.clone(), dr, seed, e))
        .collect::<Result<Vec<_>>>()?;
    let rows = scenes
        .iter()
        .enumerate()
        .map(|(s, scene)| {
            let eps = &outcomes[s * episodes_per_scene..(s + 1) * episodes_per_scene];
            let tfs: Vec<f64> = eps.iter().flatten().copied().collect();
            SceneEval {
                scene_id: scene.scene_id.clone(),
                episodes: episodes_per_scene,
                successes: tfs.len(),
                success_rate: if episodes_per_scene == 0 { 0.0 } else { tfs.len() as f64 / episodes_per_scene as f64 },
                mean_tf: (!tfs.is_empty()).then(|| tfs.iter().sum::<f64>() / tfs.len() as f64),
            }
        })
        .collect();
    Ok(EvalReport { seed, episodes_per_scene, scenes: rows })
}
