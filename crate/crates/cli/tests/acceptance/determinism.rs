//! Byte-identical CLI outputs across reruns, and vectorized rollouts equal
//! to per-env sequential ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use flowlab::harness::pipeline::{initial_policy, scene_corpus};
use flowlab::harness::LabConfig;
use flowlab::ppo::{collect_rollouts, VecEnv};
use flowlab::rng::stream;
use flowlab::world::{reset, step_chunk, DomainRandomizationConfig, WorldConfig};
use rand::Rng;

use crate::{ensure, lift, Verdict};

const SMOKE: &str = r#"
seed = 5
[corpus]
n_scenes = 1
[pretrain]
n_scenes = 1
steps = 20
batch_size = 16
[finetune]
num_envs = 4
steps_per_env = 5
minibatch_size = 10
iterations = 2
checkpoint_every = 1
[eval]
episodes_per_scene = 3
"#;

fn flowlab(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .current_dir(dir)
        .args(["--config", "smoke.toml"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("flowlab {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path) -> Result<(), String> {
    flowlab(dir, &["--out", "out", "gen-scenes"])?;
    flowlab(dir, &["--out", "out/pre", "pretrain"])?;
    flowlab(dir, &["--out", "out/ft", "finetune", "--init", "out/pre/pi_pre.ckpt", "--scenes", "out/corpus.json#0..1"])?;
    flowlab(dir, &["--out", "out/eval", "eval", "--checkpoint", "out/ft/policy.ckpt", "--scenes", "out/corpus.json"])
}

fn cli_reruns() -> Result<usize, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    fs::write(dir.join("smoke.toml"), SMOKE).map_err(|e| e.to_string())?;
    pipeline(dir)?;
    fs::rename(dir.join("out"), dir.join("first")).map_err(|e| e.to_string())?;
    pipeline(dir)?;
    let (a, b) = (files(&dir.join("first")), files(&dir.join("out")));
    ensure(a.keys().eq(b.keys()), || format!("file sets differ: {:?} vs {:?}", a.keys(), b.keys()))?;
    for expected in ["corpus.json", "pre/pi_pre.ckpt", "pre/demos.bin", "ft/policy.ckpt", "ft/curve.csv", "eval/eval.json"] {
        ensure(a.contains_key(Path::new(expected)), || format!("{expected} was not written"))?;
    }
    let differing: Vec<String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("outputs differ between runs: {differing:?}"))?;
    Ok(a.len())
}

/// Replays each env alone, in order, from the same per-env streams.
fn vectorized_matches_sequential() -> Result<usize, String> {
    let mut cfg = LabConfig::default();
    cfg.policy.integration_steps = 2;
    let policy = lift(initial_policy(&cfg))?;
    let scenes = lift(scene_corpus(&cfg, 5))?.scenes;
    let (world, dr) = (WorldConfig::default(), DomainRandomizationConfig::default());
    let (envs, steps, seed) = (6, 40, 17);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().map_err(|e| e.to_string())?;
    let batch = pool.install(|| -> Result<_, String> {
        let mut venv = lift(VecEnv::new(&scenes, &world, &dr, envs, seed))?;
        lift(collect_rollouts(&policy, &mut venv, steps))
    })?;
    let world = Arc::new(world);
    let layout = policy.layout;
    let start = |e: usize, episode: u64| {
        let key = ((e as u64) << 32) | episode;
        let pick = stream(seed, "scene-pick", key).random_range(0..scenes.len());
        reset(Arc::new(scenes[pick].clone()), world.clone(), &dr, stream(seed, "env", key)).unwrap()
    };
    let mut episodes_seen = 0;
    for e in 0..envs {
        let mut rng = stream(seed, "policy-noise", e as u64);
        let mut episode = 0;
        let (mut state, mut obs) = start(e, episode);
        for t in 0..steps {
            let i = e * steps + t;
            let flat = lift(obs.flatten(&layout))?;
            ensure(flat == batch.observation(i), || format!("env {e} step {t}: observations differ"))?;
            let z = lift(policy.encode_flat(&flat))?;
            let chain = lift(policy.sample_stochastic(&z, &mut rng))?;
            ensure(chain == batch.chains[i], || format!("env {e} step {t}: chains differ"))?;
            let r = lift(step_chunk(&mut state, &policy.to_world(chain.action())))?;
            ensure(r.reward == batch.rewards[i] && r.done == batch.dones[i], || format!("env {e} step {t}: transitions differ"))?;
            if r.done {
                episode += 1;
                episodes_seen += 1;
                (state, obs) = start(e, episode);
            } else {
                obs = r.observation;
            }
        }
    }
    ensure(episodes_seen > 0, || "no episode finished; auto-reset untested".into())?;
    Ok(envs * steps)
}

pub fn run() -> Verdict {
    let files = cli_reruns()?;
    let records = vectorized_matches_sequential()?;
    Ok(format!(
        "gen-scenes, pretrain, finetune and eval reproduced {files} files byte for byte; {records} vectorized rollout records match sequential replay"
    ))
}
