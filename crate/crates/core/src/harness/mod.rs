//! Pipeline orchestration: configuration, evaluation, ablations, reports.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use ablation::{
    benchmark_latency, run_cell, run_diversity_ablation, run_k_ablation, DiversityRow, DiversitySummary, DiversityTable,
    KRow, KTable, LatencyRow,
};
pub use config::{AblationSection, CorpusSection, EvalSection, LabConfig, PretrainSection, StageSeeds};
pub use eval::{evaluate, run_episode, Aggregate, Controller, EvalReport, OdePolicy, SceneEval, ScriptedExpert};
pub use plot::emit_plots;
pub use report::{read_csv, write_csv, Manifest};
