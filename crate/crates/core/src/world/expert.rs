//! Scripted pick-and-place controller used to produce demonstrations.
//!
//! Phases: approach above the target, descend, close, lift, transport above
//! the destination, lower, release. The controller plans all `C` rows of a
//! chunk against a noise-free prediction of its own motion.

use super::{horizontal_dist, EnvState, Support};
use crate::spaces::ActionChunk;

const HOVER: f64 = 0.06;
const XY_TOL: f64 = 0.006;
const Z_TOL: f64 = 0.005;
const CARRY_CLEARANCE: f64 = 0.03;
const RELEASE_GAP: f64 = 0.005;

struct Plan {
    gripper: [f64; 3],
    closed: bool,
    holding_target: bool,
    holding_other: bool,
    /// Target was released this chunk; hold still.
    released: bool,
}

pub fn scripted_expert(state: &EnvState) -> ActionChunk {
    let cfg = &state.config;
    let (a, b) = state.scene.goal;
    let target = &state.objects[a];
    let dest = &state.objects[b];
    let grasp_point = target.center();
    let offset_z = if state.held == Some(a) { state.grasp_offset[2] } else { 0.5 * target.height };
    let tallest = state.objects.iter().filter(|o| o.id != a).map(|o| o.top()).fold(0.0, f64::max);
    let carry_z = tallest + offset_z + CARRY_CLEARANCE + RELEASE_GAP;
    let release_z = dest.top() + RELEASE_GAP + offset_z;

    let mut plan = Plan {
        gripper: state.gripper,
        closed: state.openness < 0.5,
        holding_target: state.held == Some(a),
        holding_other: state.held.is_some() && state.held != Some(a),
        released: target.support == Support::Object(b),
    };
    let mut chunk = ActionChunk::zeros(cfg.chunk_len, cfg.action_dim);
    for r in 0..cfg.chunk_len {
        let p = plan.gripper;
        let (goal, close) = if plan.released || plan.holding_other {
            (p, false)
        } else if !plan.holding_target {
            if plan.closed {
                (p, false)
            } else if horizontal_dist(&p, &grasp_point) > XY_TOL {
                let z = grasp_point[2] + HOVER;
                ([grasp_point[0], grasp_point[1], z], false)
            } else if (p[2] - grasp_point[2]).abs() > Z_TOL {
                (grasp_point, false)
            } else {
                (p, true)
            }
        } else {
            let d = horizontal_dist(&p, &dest.position);
            if d > XY_TOL {
                if p[2] < carry_z - Z_TOL {
                    ([p[0], p[1], carry_z], true)
                } else {
                    ([dest.position[0], dest.position[1], carry_z], true)
                }
            } else if (p[2] - release_z).abs() > Z_TOL {
                ([dest.position[0], dest.position[1], release_z], true)
            } else {
                (p, false)
            }
        };
        let row = chunk.row_mut(r);
        for i in 0..3 {
            let delta = (goal[i] - p[i]).clamp(-cfg.max_delta, cfg.max_delta);
            row[i] = delta;
            plan.gripper[i] = (p[i] + delta).clamp(cfg.gripper_min[i], cfg.gripper_max[i]);
        }
        row[cfg.action_dim - 1] = if close { 1.0 } else { -1.0 };
        if close && !plan.closed {
            plan.closed = true;
            let c = grasp_point;
            let g = plan.gripper;
            let d = ((g[0] - c[0]).powi(2) + (g[1] - c[1]).powi(2) + (g[2] - c[2]).powi(2)).sqrt();
            plan.holding_target = d <= cfg.grasp_radius;
        } else if !close && plan.closed {
            plan.closed = false;
            if plan.holding_target {
                plan.holding_target = false;
                plan.released = true;
            }
            plan.holding_other = false;
        }
    }
    chunk
}
