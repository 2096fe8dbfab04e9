//! Kinematic tabletop pick-and-place world.
//!
//! A gripper moves by clamped position deltas; closing it within
//! `grasp_radius` of an object's center attaches that object, opening it
//! drops the object onto the highest support below. One call to
//! [`step_chunk`] executes a whole action chunk, which is one decision step.

mod expert;
mod randomization;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use expert::scripted_expert;
pub use randomization::{DomainRandomizationConfig, RandomizationDraw};

use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::scenes::{Relation, SceneSpec};
use crate::spaces::{ActionChunk, ObjectSlot, ObsLayout, ObservationVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Decision steps per episode `T`.
    pub episode_length: usize,
    /// Low-level steps per decision `C`.
    pub chunk_len: usize,
    pub action_dim: usize,
    pub control_hz: f64,
    pub grasp_radius: f64,
    /// Per-axis delta clamp (m per low-level step).
    pub max_delta: f64,
    pub home: [f64; 3],
    pub gripper_min: [f64; 3],
    pub gripper_max: [f64; 3],
    /// A released object may settle on a support whose top is at most this
    /// far above the object's bottom.
    pub drop_tolerance: f64,
    /// Fractional shrink of the destination footprint for IN relations.
    pub in_footprint_shrink: f64,
    /// Minimum edge clearance between objects at reset (m).
    pub placement_clearance: f64,
    pub max_placement_rejections: usize,
    pub num_envs: usize,
    pub layout: ObsLayout,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            episode_length: 25,
            chunk_len: 4,
            action_dim: 4,
            control_hz: 5.0,
            grasp_radius: 0.03,
            max_delta: 0.05,
            home: [0.3, 0.0, 0.15],
            gripper_min: [0.1, -0.3, 0.0],
            gripper_max: [0.5, 0.3, 0.35],
            drop_tolerance: 0.02,
            in_footprint_shrink: 0.25,
            placement_clearance: 0.005,
            max_placement_rejections: 100,
            num_envs: 64,
            layout: ObsLayout::default(),
        }
    }
}

impl WorldConfig {
    /// Longest episode in simulated seconds.
    pub fn max_episode_seconds(&self) -> f64 {
        (self.episode_length * self.chunk_len) as f64 / self.control_hz
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    Table,
    Object(usize),
    Gripper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: usize,
    pub class_name: String,
    pub descriptor: Vec<f64>,
    pub footprint_radius: f64,
    pub height: f64,
    /// Bottom center (m).
    pub position: [f64; 3],
    pub yaw: f64,
    pub support: Support,
}

impl WorldObject {
    pub fn center(&self) -> [f64; 3] {
        [self.position[0], self.position[1], self.position[2] + 0.5 * self.height]
    }

    pub fn top(&self) -> f64 {
        self.position[2] + self.height
    }
}

/// Machine-checkable failure counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounters {
    /// Gripper closed with no object in reach.
    pub missed_grasps: u32,
    /// Gripper closed on an object other than the target.
    pub wrong_object_grasps: u32,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub gripper: [f64; 3],
    /// 1 open, 0 closed.
    pub openness: f64,
    pub objects: Vec<WorldObject>,
    pub held: Option<usize>,
    /// Gripper position minus the held object's bottom center at attach time.
    pub grasp_offset: [f64; 3],
    pub t_low: usize,
    pub t_dec: usize,
    pub scene: Arc<SceneSpec>,
    pub dr_draw: RandomizationDraw,
    pub done: bool,
    pub success: bool,
    pub failures: FailureCounters,
    pub config: Arc<WorldConfig>,
    pub tracking_noise_std: f64,
    /// Private stream for tracking noise.
    pub rng: LabRng,
}

impl PartialEq for EnvState {
    fn eq(&self, o: &Self) -> bool {
        self.gripper == o.gripper
            && self.openness == o.openness
            && self.objects == o.objects
            && self.held == o.held
            && self.grasp_offset == o.grasp_offset
            && self.t_low == o.t_low
            && self.t_dec == o.t_dec
            && self.scene == o.scene
            && self.dr_draw == o.dr_draw
            && self.done == o.done
            && self.success == o.success
            && self.failures == o.failures
            && self.tracking_noise_std == o.tracking_noise_std
            && self.rng == o.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    /// Low-level steps elapsed in the episode.
    pub low_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: ObservationVector,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

fn horizontal_dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Draws object poses and the gripper home perturbation for `scene`.
pub fn reset(
    scene: Arc<SceneSpec>,
    config: Arc<WorldConfig>,
    dr: &DomainRandomizationConfig,
    mut rng: LabRng,
) -> Result<(EnvState, ObservationVector)> {
    dr.validate()?;
    let n = scene.objects.len();
    if n > config.layout.max_objects {
        return Err(Error::config(format!(
            "scene {} has {n} objects but only {} observation slots",
            scene.scene_id, config.layout.max_objects
        )));
    }
    let draw = RandomizationDraw::sample(dr, n, &mut rng);
    let mut objects: Vec<WorldObject> = Vec::with_capacity(n);
    let mut rejections = 0;
    for (id, spec) in scene.objects.iter().enumerate() {
        loop {
            let r = dr.placement_jitter * spec.region.spread * rng.random::<f64>().sqrt();
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let x = spec.region.center[0] + r * theta.cos();
            let y = spec.region.center[1] + r * theta.sin();
            let in_bounds =
                x >= dr.object_x[0] && x <= dr.object_x[1] && y >= dr.object_y[0] && y <= dr.object_y[1];
            let clear = objects.iter().all(|o| {
                horizontal_dist(&o.position, &[x, y])
                    >= o.footprint_radius + spec.footprint_radius + config.placement_clearance
            });
            if in_bounds && clear {
                objects.push(WorldObject {
                    id,
                    class_name: spec.class_name.clone(),
                    descriptor: spec.descriptor.clone(),
                    footprint_radius: spec.footprint_radius,
                    height: spec.height,
                    position: [x, y, 0.0],
                    yaw: draw.yaws[id],
                    support: Support::Table,
                });
                break;
            }
            rejections += 1;
            if rejections >= config.max_placement_rejections {
                return Err(Error::SceneInfeasible {
                    scene_id: scene.scene_id.clone(),
                    reason: format!("{rejections} placement rejections"),
                });
            }
        }
    }
    let mut gripper = [0.0; 3];
    for i in 0..3 {
        gripper[i] = (config.home[i] + draw.home_offset[i]).clamp(config.gripper_min[i], config.gripper_max[i]);
    }
    let state = EnvState {
        gripper,
        openness: 1.0,
        objects,
        held: None,
        grasp_offset: [0.0; 3],
        t_low: 0,
        t_dec: 0,
        scene,
        dr_draw: draw,
        done: false,
        success: false,
        failures: FailureCounters::default(),
        config,
        tracking_noise_std: dr.tracking_noise_std,
        rng,
    };
    let obs = observe(&state);
    Ok((state, obs))
}

/// Viewpoint analog: axis-wise scaling about the workspace point the camera
/// stays aimed at.
const VIEW_ANCHOR: [f64; 3] = [0.3, 0.0, 0.0];

fn view(p: [f64; 3], offset: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = VIEW_ANCHOR[i] + (p[i] - VIEW_ANCHOR[i]) * (1.0 + offset[i]);
    }
    out
}

pub fn observe(state: &EnvState) -> ObservationVector {
    let draw = &state.dr_draw;
    let g = view(state.gripper, &draw.viewpoint);
    let slots = state
        .objects
        .iter()
        .map(|o| ObjectSlot {
            position: view(o.center(), &draw.viewpoint),
            descriptor: o
                .descriptor
                .iter()
                .enumerate()
                .map(|(i, d)| draw.brightness * d + 0.1 * draw.ambient[i % 3])
                .collect(),
            present: true,
        })
        .collect();
    let mut appearance_bias = state.scene.background_bias.clone();
    let extra = [draw.brightness - 1.0, draw.ambient[0], draw.ambient[1], draw.ambient[2]];
    for (i, b) in appearance_bias.iter_mut().enumerate() {
        *b += extra[i % 4];
    }
    ObservationVector {
        proprio: [g[0], g[1], g[2], state.openness],
        slots,
        instruction: state.scene.instruction.clone(),
        appearance_bias,
    }
}

/// Effective radius of `support` when judging where a dropped object lands.
fn landing_radius(state: &EnvState, support: usize) -> f64 {
    let o = &state.objects[support];
    if support == state.scene.goal.1 && state.scene.relation == Relation::In {
        o.footprint_radius * (1.0 - state.config.in_footprint_shrink)
    } else {
        o.footprint_radius
    }
}

fn has_load(state: &EnvState, id: usize) -> bool {
    state.objects.iter().any(|o| o.support == Support::Object(id))
}

fn release(state: &mut EnvState) {
    let Some(a) = state.held.take() else { return };
    let bottom = state.objects[a].position[2];
    let xy = [state.objects[a].position[0], state.objects[a].position[1]];
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in state.objects.iter().enumerate() {
        if j == a {
            continue;
        }
        let top = o.top();
        if horizontal_dist(&o.position, &xy) <= landing_radius(state, j)
            && top <= bottom + state.config.drop_tolerance
            && best.is_none_or(|(_, t)| top > t)
        {
            best = Some((j, top));
        }
    }
    let obj = &mut state.objects[a];
    match best {
        Some((j, top)) => {
            obj.position[2] = top;
            obj.support = Support::Object(j);
        }
        None => {
            obj.position[2] = 0.0;
            obj.support = Support::Table;
        }
    }
}

fn try_grasp(state: &mut EnvState) {
    let radius = state.config.grasp_radius;
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in state.objects.iter().enumerate() {
        let d = dist3(&state.gripper, &o.center());
        if d <= radius && !has_load(state, j) && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    match best {
        Some((j, _)) => {
            let o = &mut state.objects[j];
            state.grasp_offset =
                [state.gripper[0] - o.position[0], state.gripper[1] - o.position[1], state.gripper[2] - o.position[2]];
            o.support = Support::Gripper;
            state.held = Some(j);
            if j != state.scene.goal.0 {
                state.failures.wrong_object_grasps += 1;
            }
        }
        None => state.failures.missed_grasps += 1,
    }
}

fn low_level_step(state: &mut EnvState, row: &[f64]) {
    let noise_std = state.tracking_noise_std;
    let cfg = state.config.clone();
    let mut lo = cfg.gripper_min;
    if state.held.is_some() {
        // keep the held object's bottom above the table
        lo[2] = lo[2].max(state.grasp_offset[2]);
    }
    for i in 0..3 {
        let delta = row[i].clamp(-cfg.max_delta, cfg.max_delta);
        let noise = if noise_std > 0.0 { noise_std * state.rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        state.gripper[i] = (state.gripper[i] + delta + noise).clamp(lo[i], cfg.gripper_max[i]);
    }
    if let Some(h) = state.held {
        let o = &mut state.objects[h];
        for i in 0..3 {
            o.position[i] = state.gripper[i] - state.grasp_offset[i];
        }
    }
    let close = row[cfg.action_dim - 1] > 0.0;
    if close && state.openness > 0.5 {
        state.openness = 0.0;
        try_grasp(state);
    } else if !close && state.openness < 0.5 {
        state.openness = 1.0;
        release(state);
    }
    state.t_low += 1;
}

/// Executes one chunk of low-level commands and evaluates the success
/// predicate at its end.
pub fn step_chunk(state: &mut EnvState, chunk: &ActionChunk) -> Result<StepResult> {
    if state.done {
        return Err(Error::usage("step_chunk called on a finished episode"));
    }
    let cfg = state.config.clone();
    if chunk.rows != cfg.chunk_len || chunk.cols != cfg.action_dim {
        return Err(Error::config(format!(
            "chunk is {}x{}, world expects {}x{}",
            chunk.rows, chunk.cols, cfg.chunk_len, cfg.action_dim
        )));
    }
    if chunk.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::PolicyDivergence("non-finite action".into()));
    }
    for r in 0..chunk.rows {
        low_level_step(state, chunk.row(r));
    }
    state.t_dec += 1;
    let success = success(state)?;
    state.success = success;
    state.done = success || state.t_dec >= cfg.episode_length;
    Ok(StepResult {
        observation: observe(state),
        reward: if success { 1.0 } else { 0.0 },
        done: state.done,
        info: StepInfo { success, low_steps: state.t_low },
    })
}

/// `contact(A, B) ∧ ¬contact(A, table) ∧ ¬contact(A, robot)`.
pub fn success(state: &EnvState) -> Result<bool> {
    let (a, b) = state.scene.goal;
    let n = state.objects.len();
    if a >= n || b >= n || a == b {
        return Err(Error::config(format!("scene {} lacks a distinct target and destination", state.scene.scene_id)));
    }
    let obj = &state.objects[a];
    let contact_b = obj.support == Support::Object(b);
    let contact_table = obj.support == Support::Table;
    let contact_robot = state.held == Some(a);
    Ok(contact_b && !contact_table && !contact_robot)
}

/// Steps every environment with its own chunk; results keep input order.
pub fn venv_step(states: &mut [EnvState], chunks: &[ActionChunk]) -> Result<Vec<StepResult>> {
    if states.len() != chunks.len() {
        return Err(Error::usage(format!("{} environments but {} chunks", states.len(), chunks.len())));
    }
    states
        .par_iter_mut()
        .zip(chunks.par_iter())
        .enumerate()
        .map(|(i, (s, c))| step_chunk(s, c).map_err(|e| Error::Env { index: i, source: Box::new(e) }))
        .collect()
}
