//! Procedural scene generation: template grammar, numeric design, QA
//! rejection loop, and corpora with subsets for diversity studies.

mod corpus;
mod design;
mod grammar;
mod qa;
mod spec;

pub use corpus::{generate_corpus, sample_subsets, CorpusConfig, CorpusMetrics, SceneCorpus, SceneSubset, CORPUS_VERSION};
pub use design::{design_scene, find_class, sample_instruction, unit_descriptor, AssetClass, ClassKind, DesignConfig, ASSET_CLASSES};
pub use grammar::{parse_task, render, SceneGraph};
pub use qa::{qa_check, CheckResult, Checker, QaConfig, QaReport, Verdict};
pub use spec::{ObjectRole, PlacementRegion, Relation, SceneObjectSpec, SceneSpec};
