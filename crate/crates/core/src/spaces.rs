//! Observation and action containers shared by the world and the policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of the structured observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    /// Object slots `M`.
    pub max_objects: usize,
    /// Descriptor width `d`.
    pub descriptor_dim: usize,
    /// Appearance-bias width `b`.
    pub bias_dim: usize,
}

impl Default for ObsLayout {
    fn default() -> Self {
        ObsLayout { max_objects: 6, descriptor_dim: 4, bias_dim: 4 }
    }
}

pub const PROPRIO_DIM: usize = 4;

impl ObsLayout {
    pub fn slot_width(&self) -> usize {
        3 + self.descriptor_dim + 1
    }

    pub fn width(&self) -> usize {
        PROPRIO_DIM + self.max_objects * self.slot_width() + 2 * self.descriptor_dim + self.bias_dim
    }

    pub fn slots_offset(&self) -> usize {
        PROPRIO_DIM
    }

    pub fn instruction_offset(&self) -> usize {
        PROPRIO_DIM + self.max_objects * self.slot_width()
    }

    pub fn bias_offset(&self) -> usize {
        self.instruction_offset() + 2 * self.descriptor_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSlot {
    pub position: [f64; 3],
    pub descriptor: Vec<f64>,
    pub present: bool,
}

/// Structured features standing in for image, language and proprioception.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    /// Gripper x, y, z (m) and openness in `[0, 1]`.
    pub proprio: [f64; 4],
    pub slots: Vec<ObjectSlot>,
    /// Target descriptor followed by destination descriptor.
    pub instruction: Vec<f64>,
    pub appearance_bias: Vec<f64>,
}

impl ObservationVector {
    /// Flat layout: proprio, slots (position, descriptor, flag), instruction, bias.
    /// Slots beyond `slots.len()` are zero-filled.
    pub fn flatten(&self, layout: &ObsLayout) -> Result<Vec<f64>> {
        let d = layout.descriptor_dim;
        if self.slots.len() > layout.max_objects
            || self.instruction.len() != 2 * d
            || self.appearance_bias.len() != layout.bias_dim
            || self.slots.iter().any(|s| s.descriptor.len() != d)
        {
            return Err(Error::config("observation does not fit the configured layout"));
        }
        let mut out = Vec::with_capacity(layout.width());
        out.extend_from_slice(&self.proprio);
        for i in 0..layout.max_objects {
            match self.slots.get(i) {
                Some(s) if s.present => {
                    out.extend_from_slice(&s.position);
                    out.extend_from_slice(&s.descriptor);
                    out.push(1.0);
                }
                _ => out.extend(std::iter::repeat_n(0.0, layout.slot_width())),
            }
        }
        out.extend_from_slice(&self.instruction);
        out.extend_from_slice(&self.appearance_bias);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.proprio.iter().all(|v| v.is_finite())
            && self.slots.iter().all(|s| s.position.iter().chain(&s.descriptor).all(|v| v.is_finite()))
            && self.instruction.iter().chain(&self.appearance_bias).all(|v| v.is_finite())
    }
}

/// `rows x cols` chunk of low-level commands. The first `cols - 1` columns
/// are end-effector position deltas in meters per low-level step; the last
/// column is the gripper command (positive closes, otherwise opens).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ActionChunk { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[[f64; 4]]) -> Self {
        ActionChunk { rows: rows.len(), cols: 4, data: rows.iter().flatten().copied().collect() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}
