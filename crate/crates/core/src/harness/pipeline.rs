//! Pipeline stages with seeds taken from the lab configuration.

use crate::error::Result;
use crate::harness::config::LabConfig;
use crate::harness::eval::{evaluate, EvalReport, OdePolicy};
use crate::imitation::{generate_demos, pretrain, DemoSet, PretrainConfig, PretrainLog};
use crate::policy::FlowPolicy;
use crate::ppo::{train, TrainConfig, TrainOutcome};
use crate::rng::{derive_seed, stream};
use crate::scenes::{generate_corpus, SceneCorpus, SceneSpec};

/// The fine-tuning and evaluation corpus.
pub fn scene_corpus(cfg: &LabConfig, n: usize) -> Result<SceneCorpus> {
    generate_corpus(n, cfg.seeds().corpus, &cfg.corpus.generation)
}

/// The pretraining corpus, drawn from its own seed so it never shares
/// scenes with [`scene_corpus`].
pub fn pretraining_corpus(cfg: &LabConfig) -> Result<SceneCorpus> {
    generate_corpus(cfg.pretrain.n_scenes, cfg.seeds().pretrain_corpus, &cfg.corpus.generation)
}

pub fn demonstrations(cfg: &LabConfig, corpus: &SceneCorpus) -> Result<DemoSet> {
    generate_demos(
        &corpus.scenes,
        corpus.generation_seed,
        &cfg.world,
        &cfg.randomization,
        &cfg.demos,
        cfg.seeds().demos,
    )
}

pub fn initial_policy(cfg: &LabConfig) -> Result<FlowPolicy> {
    FlowPolicy::new(cfg.policy.clone(), cfg.world.layout, &mut stream(cfg.seeds().policy_init, "init", 0))
}

pub fn pretrain_config(cfg: &LabConfig) -> PretrainConfig {
    PretrainConfig { seed: cfg.seeds().pretrain, ..cfg.pretrain.optim.clone() }
}

pub struct Pretrained {
    pub corpus: SceneCorpus,
    pub demos: DemoSet,
    pub policy: FlowPolicy,
    pub log: PretrainLog,
}

/// Pretraining corpus, expert demonstrations, and the imitation policy.
pub fn pretrain_stage(cfg: &LabConfig) -> Result<Pretrained> {
    let corpus = pretraining_corpus(cfg)?;
    let demos = demonstrations(cfg, &corpus)?;
    let mut policy = initial_policy(cfg)?;
    let log = pretrain(&mut policy, &demos, &pretrain_config(cfg))?;
    Ok(Pretrained { corpus, demos, policy, log })
}

/// Fine-tuning config for run seed `run_seed`.
pub fn finetune_config(cfg: &LabConfig, run_seed: u64) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seeds().finetune, "run", run_seed), ..cfg.finetune.clone() }
}

pub fn finetune_stage(
    cfg: &LabConfig,
    init: &FlowPolicy,
    scenes: &[SceneSpec],
    run_seed: u64,
    on_checkpoint: impl FnMut(usize, &FlowPolicy) -> Result<()>,
) -> Result<TrainOutcome> {
    train(&finetune_config(cfg, run_seed), init, scenes, &cfg.world, &cfg.randomization, on_checkpoint)
}

/// ODE evaluation at the policy's own `K`.
pub fn evaluate_stage(cfg: &LabConfig, policy: &FlowPolicy, scenes: &[SceneSpec]) -> Result<EvalReport> {
    evaluate(
        &OdePolicy(policy),
        scenes,
        &cfg.world,
        &cfg.randomization,
        cfg.eval.episodes_per_scene,
        cfg.seeds().eval,
    )
}
