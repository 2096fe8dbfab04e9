use serde::{Deserialize, Serialize};

/// Spatial relation between the manipulated object and its destination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Relation {
    On,
    In,
}

impl Relation {
    pub fn word(self) -> &'static str {
        match self {
            Relation::On => "on",
            Relation::In => "in",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRole {
    Target,
    Destination,
    Distractor,
}

/// Disk of admissible object-center positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRegion {
    pub center: [f64; 2],
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObjectSpec {
    pub class_name: String,
    pub role: ObjectRole,
    pub descriptor_seed: u64,
    pub descriptor: Vec<f64>,
    pub footprint_radius: f64,
    pub height: f64,
    pub region: PlacementRegion,
}

/// Numeric instantiation of a scene graph. Objects are stored in observation
/// slot order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub instruction_text: String,
    pub relation: Relation,
    pub objects: Vec<SceneObjectSpec>,
    pub background_bias: Vec<f64>,
    /// Slot indices of the manipulated object and its destination.
    pub goal: (usize, usize),
    /// Target descriptor followed by destination descriptor.
    pub instruction: Vec<f64>,
}

impl SceneSpec {
    pub fn target(&self) -> &SceneObjectSpec {
        &self.objects[self.goal.0]
    }

    pub fn destination(&self) -> &SceneObjectSpec {
        &self.objects[self.goal.1]
    }
}
