//! Success predicate against a geometric checker; scripted expert coverage.

use std::sync::Arc;

use rand::Rng;

use flowlab::rng::stream;
use flowlab::scenes::{generate_corpus, CorpusConfig, Relation, SceneSpec};
use flowlab::spaces::ActionChunk;
use flowlab::world::{reset, scripted_expert, step_chunk, success, DomainRandomizationConfig, EnvState, WorldConfig};

use crate::{ensure, Verdict};

const STATES: usize = 1000;
const EXPERT_SCENES: usize = 50;

/// Reads the goal from poses alone: the target's bottom lies on the
/// destination's top surface, its center within the (possibly shrunk)
/// landing footprint, it is off the table, and the gripper does not hold it.
fn geometric(s: &EnvState) -> bool {
    let (a, b) = s.scene.goal;
    let (t, d) = (&s.objects[a], &s.objects[b]);
    let shrink = if s.scene.relation == Relation::In { 1.0 - s.config.in_footprint_shrink } else { 1.0 };
    let horizontal = (t.position[0] - d.position[0]).hypot(t.position[1] - d.position[1]);
    let on_top = (t.position[2] - (d.position[2] + d.height)).abs() < 1e-9;
    let off_table = t.position[2] > 1e-9;
    on_top && off_table && horizontal <= d.footprint_radius * shrink + 1e-12 && s.held != Some(a)
}

fn start(scene: &SceneSpec, key: u64) -> EnvState {
    let dr = DomainRandomizationConfig::default();
    reset(Arc::new(scene.clone()), Arc::new(WorldConfig::default()), &dr, stream(61, "predicate-env", key)).unwrap().0
}

fn random_chunk(rng: &mut impl Rng) -> ActionChunk {
    let mut ch = ActionChunk::zeros(4, 4);
    for r in 0..4 {
        let row = ch.row_mut(r);
        for v in &mut row[..3] {
            *v = rng.random_range(-0.05..0.05);
        }
        row[3] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    ch
}

pub fn run() -> Verdict {
    let corpus = generate_corpus(30, 60, &CorpusConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = stream(62, "predicate-states", 0);
    let (mut checked, mut positives, mut disagreements) = (0, 0, Vec::new());
    let mut episode = 0;
    while checked < STATES {
        let scene = &corpus.scenes[rng.random_range(0..corpus.len())];
        let mut s = start(scene, episode);
        episode += 1;
        // Mix expert and random chunks so states cover successes, drops,
        // stacks on distractors, and carried targets.
        let p_random = rng.random_range(0.0..0.7);
        while !s.done && checked < STATES {
            let chunk = if rng.random::<f64>() < p_random { random_chunk(&mut rng) } else { scripted_expert(&s) };
            step_chunk(&mut s, &chunk).map_err(|e| e.to_string())?;
            let got = success(&s).map_err(|e| e.to_string())?;
            if got != geometric(&s) {
                disagreements.push(format!("episode {episode} step {}: predicate {got}", s.t_dec));
            }
            positives += got as usize;
            checked += 1;
        }
    }
    ensure(disagreements.is_empty(), || format!("{} disagreements, first: {}", disagreements.len(), disagreements[0]))?;
    ensure(positives >= 20 && positives <= STATES - 20, || format!("uninformative state mix: {positives} positives"))?;

    let qa_scenes = generate_corpus(EXPERT_SCENES, 63, &CorpusConfig::default()).map_err(|e| e.to_string())?;
    let mut solved = 0;
    for (i, scene) in qa_scenes.scenes.iter().enumerate() {
        let mut s = start(scene, 10_000 + i as u64);
        while !s.done {
            let chunk = scripted_expert(&s);
            step_chunk(&mut s, &chunk).map_err(|e| e.to_string())?;
        }
        solved += s.success as usize;
    }
    ensure(solved == EXPERT_SCENES, || format!("expert solved {solved}/{EXPERT_SCENES} scenes"))?;
    Ok(format!(
        "{STATES} states ({positives} successes), 0 disagreements; expert solved {solved}/{EXPERT_SCENES} QA-passing scenes"
    ))
}
