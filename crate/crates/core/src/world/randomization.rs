use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-episode perturbation ranges, each `[low, high]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainRandomizationConfig {
    /// Object center x (m); placement draws are rejected outside it.
    pub object_x: [f64; 2],
    pub object_y: [f64; 2],
    pub object_yaw: [f64; 2],
    /// Added to the gripper home height (m).
    pub robot_z_perturb: [f64; 2],
    /// Joint-space perturbation (rad), mapped to a home-pose offset.
    pub joint_perturb: [f64; 2],
    /// Meters of home-pose offset per radian of joint perturbation.
    pub joint_to_pose_scale: f64,
    /// Per-axis camera offset (m) analog, drawn independently for x, y, z.
    pub viewpoint_offset: [f64; 2],
    pub brightness: [f64; 2],
    /// Per-channel ambient color.
    pub ambient_color: [f64; 2],
    /// Fraction of each placement region's spread used for position draws.
    pub placement_jitter: f64,
    /// Gaussian tracking noise per low-level step (m).
    pub tracking_noise_std: f64,
}

impl Default for DomainRandomizationConfig {
    fn default() -> Self {
        DomainRandomizationConfig {
            object_x: [0.2, 0.4],
            object_y: [-0.15, 0.15],
            object_yaw: [0.0, TAU],
            robot_z_perturb: [0.0, 0.05],
            joint_perturb: [-0.1, 0.1],
            joint_to_pose_scale: 0.1,
            viewpoint_offset: [-0.05, 0.05],
            brightness: [0.5, 1.5],
            ambient_color: [0.0, 0.6],
            placement_jitter: 1.0,
            tracking_noise_std: 0.002,
        }
    }
}

impl DomainRandomizationConfig {
    /// Every perturbation pinned to a single value; positions at region centers.
    pub fn fixed() -> Self {
        DomainRandomizationConfig {
            object_yaw: [0.0, 0.0],
            robot_z_perturb: [0.0, 0.0],
            joint_perturb: [0.0, 0.0],
            viewpoint_offset: [0.0, 0.0],
            brightness: [1.0, 1.0],
            ambient_color: [0.0, 0.0],
            placement_jitter: 0.0,
            tracking_noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("object_x", self.object_x),
            ("object_y", self.object_y),
            ("object_yaw", self.object_yaw),
            ("robot_z_perturb", self.robot_z_perturb),
            ("joint_perturb", self.joint_perturb),
            ("viewpoint_offset", self.viewpoint_offset),
            ("brightness", self.brightness),
            ("ambient_color", self.ambient_color),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("randomization range {name} must satisfy low <= high")));
            }
        }
        if !(0.0..=1.0).contains(&self.placement_jitter) || self.tracking_noise_std < 0.0 {
            return Err(Error::config("placement jitter must lie in [0, 1] and tracking noise be non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    // Always consume one draw so the stream layout does not depend on the ranges.
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Values realized at reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationDraw {
    pub home_offset: [f64; 3],
    pub viewpoint: [f64; 3],
    pub brightness: f64,
    pub ambient: [f64; 3],
    pub yaws: Vec<f64>,
}

impl RandomizationDraw {
    pub(crate) fn sample<R: Rng + ?Sized>(cfg: &DomainRandomizationConfig, n_objects: usize, rng: &mut R) -> Self {
        let z = uniform(rng, cfg.robot_z_perturb);
        let jx = uniform(rng, cfg.joint_perturb) * cfg.joint_to_pose_scale;
        let jy = uniform(rng, cfg.joint_perturb) * cfg.joint_to_pose_scale;
        let jz = uniform(rng, cfg.joint_perturb) * cfg.joint_to_pose_scale;
        let viewpoint = [
            uniform(rng, cfg.viewpoint_offset),
            uniform(rng, cfg.viewpoint_offset),
            uniform(rng, cfg.viewpoint_offset),
        ];
        let brightness = uniform(rng, cfg.brightness);
        let ambient =
            [uniform(rng, cfg.ambient_color), uniform(rng, cfg.ambient_color), uniform(rng, cfg.ambient_color)];
        let yaws = (0..n_objects).map(|_| uniform(rng, cfg.object_yaw)).collect();
        RandomizationDraw { home_offset: [jx, jy, z + jz], viewpoint, brightness, ambient, yaws }
    }
}
