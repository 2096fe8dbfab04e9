//! Corpus generation with the QA rejection loop, persistence, and subsets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::{design_scene, sample_instruction, DesignConfig};
use super::grammar::parse_task;
use super::qa::{qa_check, Checker, QaConfig};
use super::spec::SceneSpec;
use crate::artifact::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub max_attempts: usize,
    pub design: DesignConfig,
    pub qa: QaConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { max_attempts: 50, design: DesignConfig::default(), qa: QaConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub avg_attempts: f64,
    pub total_attempts: usize,
    /// Attempts used for each scene, in corpus order.
    pub attempts: Vec<usize>,
    /// Fraction of all attempts on which each checker passed.
    pub pass_rates: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCorpus {
    pub version: u32,
    pub generation_seed: u64,
    pub metrics: CorpusMetrics,
    pub scenes: Vec<SceneSpec>,
}

struct SceneOutcome {
    spec: SceneSpec,
    attempts: usize,
    passes: [usize; 4],
}

fn generate_one(index: usize, seed: u64, cfg: &CorpusConfig) -> Result<SceneOutcome> {
    let mut passes = [0usize; 4];
    for attempt in 0..cfg.max_attempts {
        let attempt_seed = derive_seed(seed, "scene-attempt", ((index as u64) << 16) | attempt as u64);
        let mut rng = stream(attempt_seed, "instruction", 0);
        let text = sample_instruction(&mut rng);
        let graph = parse_task(&text)?;
        let spec = design_scene(&graph, &format!("scene-{index:04}"), attempt_seed, &cfg.design)?;
        let (report, repaired) = qa_check(&spec, &cfg.qa);
        for (k, c) in Checker::ALL.iter().enumerate() {
            if report.passed(*c) {
                passes[k] += 1;
            }
        }
        if report.accepted() {
            return Ok(SceneOutcome { spec: repaired, attempts: attempt + 1, passes });
        }
    }
    Err(Error::GenerationStall { index, attempts: cfg.max_attempts })
}

/// Generates `n` QA-accepted scenes. Scene `i` depends only on `(seed, i)`.
pub fn generate_corpus(n: usize, seed: u64, cfg: &CorpusConfig) -> Result<SceneCorpus> {
    if n == 0 {
        return Err(Error::config("corpus size must be at least 1"));
    }
    let outcomes: Vec<SceneOutcome> =
        (0..n).into_par_iter().map(|i| generate_one(i, seed, cfg)).collect::<Result<_>>()?;
    let attempts: Vec<usize> = outcomes.iter().map(|o| o.attempts).collect();
    let total_attempts: usize = attempts.iter().sum();
    let mut pass_rates = BTreeMap::new();
    for (k, c) in Checker::ALL.iter().enumerate() {
        let passed: usize = outcomes.iter().map(|o| o.passes[k]).sum();
        pass_rates.insert(c.name().to_string(), passed as f64 / total_attempts as f64);
    }
    Ok(SceneCorpus {
        version: CORPUS_VERSION,
        generation_seed: seed,
        metrics: CorpusMetrics {
            avg_attempts: total_attempts as f64 / n as f64,
            total_attempts,
            attempts,
            pass_rates,
        },
        scenes: outcomes.into_iter().map(|o| o.spec).collect(),
    })
}

impl SceneCorpus {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let corpus: SceneCorpus = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format { path: path.display().to_string(), message: e.to_string() })?;
        if corpus.version != CORPUS_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("corpus version {} is not supported (expected {CORPUS_VERSION})", corpus.version),
            });
        }
        Ok(corpus)
    }

    pub fn select(&self, indices: &[usize]) -> Vec<SceneSpec> {
        indices.iter().map(|&i| self.scenes[i].clone()).collect()
    }
}

/// A uniform sample of corpus indices in a fixed internal order, with its
/// complement in corpus order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSubset {
    pub members: Vec<usize>,
    pub complement: Vec<usize>,
}

impl SceneSubset {
    /// The first `n` members: the training set for an `n`-scene run.
    pub fn prefix(&self, n: usize) -> &[usize] {
        &self.members[..n.min(self.members.len())]
    }
}

pub fn sample_subsets(corpus_len: usize, subset_size: usize, count: usize, seed: u64) -> Result<Vec<SceneSubset>> {
    if subset_size > corpus_len {
        return Err(Error::config(format!("subset size {subset_size} exceeds corpus size {corpus_len}")));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = stream(seed, "subset", i as u64);
            let mut all: Vec<usize> = (0..corpus_len).collect();
            all.shuffle(&mut rng);
            let members = all[..subset_size].to_vec();
            let mut complement = all[subset_size..].to_vec();
            complement.sort_unstable();
            SceneSubset { members, complement }
        })
        .collect())
}
