//! Numeric layout design: sizes, placement regions, appearance descriptors.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grammar::SceneGraph;
use super::spec::{ObjectRole, PlacementRegion, Relation, SceneObjectSpec, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassKind {
    /// Small object that can be picked up.
    Item,
    /// Flat support; objects go ON it.
    Surface,
    /// Container; objects go IN it.
    Container,
}

pub struct AssetClass {
    pub name: &'static str,
    pub kind: ClassKind,
    pub radius: [f64; 2],
    pub height: [f64; 2],
}

const fn item(name: &'static str, radius: [f64; 2], height: [f64; 2]) -> AssetClass {
    AssetClass { name, kind: ClassKind::Item, radius, height }
}
const fn surface(name: &'static str, radius: [f64; 2], height: [f64; 2]) -> AssetClass {
    AssetClass { name, kind: ClassKind::Surface, radius, height }
}
const fn container(name: &'static str, radius: [f64; 2], height: [f64; 2]) -> AssetClass {
    AssetClass { name, kind: ClassKind::Container, radius, height }
}

pub const ASSET_CLASSES: &[AssetClass] = &[
    item("green cube", [0.015, 0.025], [0.03, 0.05]),
    item("carrot", [0.015, 0.025], [0.02, 0.04]),
    item("orange", [0.025, 0.04], [0.05, 0.08]),
    item("banana", [0.02, 0.035], [0.03, 0.04]),
    item("broccoli", [0.025, 0.045], [0.05, 0.08]),
    item("tomato", [0.02, 0.035], [0.04, 0.06]),
    item("cucumber", [0.015, 0.025], [0.03, 0.04]),
    item("red cup", [0.025, 0.045], [0.06, 0.09]),
    item("spoon", [0.015, 0.02], [0.01, 0.02]),
    item("pen", [0.01, 0.015], [0.01, 0.015]),
    item("pear", [0.025, 0.04], [0.06, 0.09]),
    item("apple", [0.025, 0.04], [0.05, 0.08]),
    item("teacup", [0.025, 0.04], [0.04, 0.06]),
    item("marker", [0.01, 0.015], [0.015, 0.02]),
    item("green apple", [0.025, 0.04], [0.05, 0.08]),
    item("tennis ball", [0.03, 0.035], [0.06, 0.07]),
    item("mushroom", [0.015, 0.025], [0.03, 0.05]),
    item("lemon", [0.02, 0.03], [0.04, 0.06]),
    item("green eraser", [0.015, 0.02], [0.01, 0.02]),
    item("teapot", [0.035, 0.05], [0.08, 0.12]),
    surface("plate", [0.035, 0.049], [0.01, 0.02]),
    surface("tray", [0.035, 0.049], [0.01, 0.02]),
    surface("blue napkin", [0.032, 0.042], [0.002, 0.005]),
    surface("white dish", [0.035, 0.045], [0.01, 0.02]),
    surface("wooden tray", [0.035, 0.049], [0.01, 0.025]),
    surface("yellow cube", [0.021, 0.028], [0.04, 0.06]),
    surface("cutting board", [0.035, 0.049], [0.01, 0.02]),
    container("bowl", [0.032, 0.045], [0.03, 0.05]),
    container("basket", [0.035, 0.049], [0.04, 0.06]),
    container("gray basket", [0.035, 0.049], [0.04, 0.06]),
    container("saucepan", [0.035, 0.045], [0.04, 0.06]),
    container("pot", [0.035, 0.049], [0.05, 0.07]),
    container("pen holder", [0.021, 0.028], [0.05, 0.08]),
    container("red box", [0.032, 0.042], [0.03, 0.05]),
    container("fruit bowl", [0.035, 0.049], [0.03, 0.05]),
];

pub fn find_class(name: &str) -> Option<&'static AssetClass> {
    ASSET_CLASSES.iter().find(|c| c.name == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    pub descriptor_dim: usize,
    pub bias_dim: usize,
    pub max_objects: usize,
    /// Relative weights for 0..=4 distractors.
    pub distractor_weights: Vec<f64>,
    pub region_spread: f64,
    pub workspace_x: [f64; 2],
    pub workspace_y: [f64; 2],
    /// Center draws per object before settling for an overlapping one.
    pub placement_tries: usize,
    pub clearance: f64,
    pub background_bias_scale: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            descriptor_dim: 4,
            bias_dim: 4,
            max_objects: 6,
            distractor_weights: vec![0.05, 0.10, 0.25, 0.30, 0.30],
            region_spread: 0.012,
            workspace_x: [0.2, 0.4],
            workspace_y: [-0.15, 0.15],
            placement_tries: 40,
            clearance: 0.005,
            background_bias_scale: 0.2,
        }
    }
}

/// Unit-norm appearance descriptor drawn from `seed`.
pub fn unit_descriptor(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = stream(seed, "descriptor", 0);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Instantiates `graph` into a numeric scene. Distractor count, sizes,
/// regions, descriptors and slot order all derive from `seed`. The output
/// is not guaranteed to pass QA.
pub fn design_scene(graph: &SceneGraph, scene_id: &str, seed: u64, cfg: &DesignConfig) -> Result<SceneSpec> {
    graph.validate()?;
    let mut rng = stream(seed, "design", 0);
    let target = find_class(&graph.target)
        .ok_or_else(|| Error::config(format!("unknown asset class '{}'", graph.target)))?;
    let dest = find_class(&graph.destination)
        .ok_or_else(|| Error::config(format!("unknown asset class '{}'", graph.destination)))?;

    let max_d = cfg.max_objects.saturating_sub(2).min(cfg.distractor_weights.len().saturating_sub(1));
    let n_distractors = if graph.distractors.is_empty() {
        pick_weighted(&mut rng, &cfg.distractor_weights[..=max_d])
    } else {
        graph.distractors.len()
    };
    let distractors: Vec<&AssetClass> = if graph.distractors.is_empty() {
        let mut pool: Vec<&AssetClass> =
            ASSET_CLASSES.iter().filter(|c| c.name != target.name && c.name != dest.name).collect();
        pool.shuffle(&mut rng);
        pool.truncate(n_distractors);
        pool
    } else {
        graph
            .distractors
            .iter()
            .map(|n| find_class(n).ok_or_else(|| Error::config(format!("unknown asset class '{n}'"))))
            .collect::<Result<_>>()?
    };

    let mut members: Vec<(&AssetClass, ObjectRole)> = vec![(target, ObjectRole::Target), (dest, ObjectRole::Destination)];
    members.extend(distractors.into_iter().map(|c| (c, ObjectRole::Distractor)));
    if members.len() > cfg.max_objects {
        return Err(Error::config(format!("{} objects exceed {} slots", members.len(), cfg.max_objects)));
    }

    let s = cfg.region_spread;
    let mut objects: Vec<SceneObjectSpec> = Vec::with_capacity(members.len());
    for (class, role) in members {
        let radius = rng.random_range(class.radius[0]..=class.radius[1]);
        let height = rng.random_range(class.height[0]..=class.height[1]);
        let mut center = [0.0; 2];
        for _ in 0..cfg.placement_tries.max(1) {
            center = [
                rng.random_range(cfg.workspace_x[0] + s..=cfg.workspace_x[1] - s),
                rng.random_range(cfg.workspace_y[0] + s..=cfg.workspace_y[1] - s),
            ];
            let clear = objects.iter().all(|o| {
                let d = ((o.region.center[0] - center[0]).powi(2) + (o.region.center[1] - center[1]).powi(2)).sqrt();
                d >= o.region.spread + o.footprint_radius + s + radius + cfg.clearance
            });
            if clear {
                break;
            }
        }
        let descriptor_seed = derive_seed(seed, class.name, 0);
        objects.push(SceneObjectSpec {
            class_name: class.name.to_string(),
            role,
            descriptor_seed,
            descriptor: unit_descriptor(descriptor_seed, cfg.descriptor_dim),
            footprint_radius: radius,
            height,
            region: PlacementRegion { center, spread: s },
        });
    }

    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(&mut rng);
    let objects: Vec<SceneObjectSpec> = order.iter().map(|&i| objects[i].clone()).collect();
    let a = order.iter().position(|&i| i == 0).expect("target present");
    let b = order.iter().position(|&i| i == 1).expect("destination present");
    let background_bias =
        (0..cfg.bias_dim).map(|_| rng.random_range(-1.0..=1.0) * cfg.background_bias_scale).collect();
    let mut instruction = objects[a].descriptor.clone();
    instruction.extend_from_slice(&objects[b].descriptor);

    Ok(SceneSpec {
        scene_id: scene_id.to_string(),
        instruction_text: graph.instruction_text.clone(),
        relation: graph.goal_relation(),
        objects,
        background_bias,
        goal: (a, b),
        instruction,
    })
}

/// Draws a templated instruction: an item placed on or in a receptacle.
pub fn sample_instruction<R: Rng + ?Sized>(rng: &mut R) -> String {
    let items: Vec<&AssetClass> = ASSET_CLASSES.iter().filter(|c| c.kind == ClassKind::Item).collect();
    let receptacles: Vec<&AssetClass> = ASSET_CLASSES.iter().filter(|c| c.kind != ClassKind::Item).collect();
    let a = items[rng.random_range(0..items.len())];
    let b = receptacles[rng.random_range(0..receptacles.len())];
    let rel = if b.kind == ClassKind::Container { Relation::In } else { Relation::On };
    format!("put the {} {} the {}", a.name, rel.word(), b.name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::grammar::parse_task;

    #[test]
    fn class_names_fit_the_grammar() {
        for c in ASSET_CLASSES {
            assert!(c.name.split(' ').count() <= 2, "{}", c.name);
            assert!(c.radius[0] <= c.radius[1] && c.height[0] <= c.height[1]);
        }
        let mut rng = stream(1, "t", 0);
        for _ in 0..50 {
            parse_task(&sample_instruction(&mut rng)).unwrap();
        }
    }

    #[test]
    fn design_is_deterministic_and_goal_indices_track_roles() {
        let g = parse_task("put the pen in the pen holder").unwrap();
        let cfg = DesignConfig::default();
        for seed in 0..30 {
            let s1 = design_scene(&g, "s", seed, &cfg).unwrap();
            let s2 = design_scene(&g, "s", seed, &cfg).unwrap();
            assert_eq!(s1, s2);
            assert!(s1.objects.len() >= 2 && s1.objects.len() <= 6);
            assert_eq!(s1.target().role, ObjectRole::Target);
            assert_eq!(s1.target().class_name, "pen");
            assert_eq!(s1.destination().class_name, "pen holder");
            assert_eq!(s1.instruction.len(), 8);
            let n: f64 = s1.target().descriptor.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_class_is_a_config_error() {
        let g = SceneGraph::new("unicorn", Relation::On, "plate");
        assert!(matches!(design_scene(&g, "s", 0, &DesignConfig::default()), Err(Error::Config(_))));
    }
}
