//! Lab configuration: one TOML document covering every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::read_file;
use crate::error::{Error, Result};
use crate::imitation::{DemoConfig, PretrainConfig};
use crate::policy::PolicyConfig;
use crate::ppo::TrainConfig;
use crate::rng::derive_seed;
use crate::scenes::CorpusConfig;
use crate::world::{DomainRandomizationConfig, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub n_scenes: usize,
    #[serde(flatten)]
    pub generation: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { n_scenes: 32, generation: CorpusConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    /// Scenes of the separate pretraining corpus; never part of the
    /// fine-tuning corpus.
    pub n_scenes: usize,
    #[serde(flatten)]
    pub optim: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { n_scenes: 40, optim: PretrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes_per_scene: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes_per_scene: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    /// Number of sampled training subsets `H_i`.
    pub subsets: usize,
    pub subset_size: usize,
    /// Fine-tuning seeds per subset.
    pub seeds: Vec<u64>,
    /// Training-set sizes `N`; each uses the first `N` scenes of a subset.
    pub ladder: Vec<usize>,
    pub k_ladder: Vec<usize>,
    /// Fine-tuning seeds per `K`.
    pub k_seeds: Vec<u64>,
    pub latency_ks: Vec<usize>,
    pub latency_samples: usize,
    pub latency_warmup: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            subsets: 2,
            subset_size: 16,
            seeds: vec![0, 1],
            ladder: vec![1, 4, 16],
            k_ladder: vec![1, 2, 4],
            k_seeds: vec![0],
            latency_ks: vec![1, 2, 4, 10],
            latency_samples: 1000,
            latency_warmup: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub world: WorldConfig,
    pub randomization: DomainRandomizationConfig,
    pub policy: PolicyConfig,
    pub demos: DemoConfig,
    pub pretrain: PretrainSection,
    pub finetune: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

/// Named seeds derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub corpus: u64,
    pub pretrain_corpus: u64,
    pub demos: u64,
    pub policy_init: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub eval: u64,
    pub subsets: u64,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: LabConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format { path: path.display().to_string(), message: "config is not UTF-8".into() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world_consistent()?;
        self.policy.validate()?;
        self.randomization.validate()?;
        if self.finetune.steps_per_env == 0 || self.finetune.num_envs == 0 && self.finetune.envs_per_scene == 0 {
            return Err(Error::config("fine-tuning needs at least one env and one step"));
        }
        let a = &self.ablation;
        if a.ladder.iter().any(|&n| n == 0 || n > a.subset_size) {
            return Err(Error::config(format!("ladder entries must lie in 1..={}", a.subset_size)));
        }
        if a.k_ladder.iter().chain(&a.latency_ks).any(|&k| k == 0) {
            return Err(Error::config("K ladders must be positive"));
        }
        Ok(())
    }

    fn world_consistent(&self) -> Result<()> {
        let (w, p) = (&self.world, &self.policy);
        if w.chunk_len != p.chunk_len || w.action_dim != p.action_dim {
            return Err(Error::config(format!(
                "world chunks are {}x{} but the policy emits {}x{}",
                w.chunk_len, w.action_dim, p.chunk_len, p.action_dim
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let d = |tag| derive_seed(self.seed, tag, 0);
        StageSeeds {
            corpus: d("corpus"),
            pretrain_corpus: d("pretrain-corpus"),
            demos: d("demos"),
            policy_init: d("policy-init"),
            pretrain: d("pretrain"),
            finetune: d("finetune"),
            eval: d("eval"),
            subsets: d("subsets"),
        }
    }
}
