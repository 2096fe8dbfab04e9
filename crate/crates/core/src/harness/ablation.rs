//! Training-set-size and integration-step ablations.
//!
//! Every cell (one fine-tuning run plus its evaluation) lives in its own
//! directory and is sealed by `cell.json`, written last. A sealed cell whose
//! files still hash to the recorded values is loaded instead of recomputed.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_file, sha256_file, write_atomic};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::harness::config::LabConfig;
use crate::harness::eval::EvalReport;
use crate::harness::pipeline::{evaluate_stage, finetune_config, finetune_stage};
use crate::harness::report::{read_csv, write_csv, write_curve};
use crate::policy::FlowPolicy;
use crate::ppo::CurveRow;
use crate::rng::stream;
use crate::scenes::{sample_subsets, SceneCorpus, SceneSpec};
use crate::world::reset;

pub const CELL_FILE: &str = "cell.json";
pub const CELL_CHECKPOINT: &str = "policy.ckpt";
pub const CELL_CURVE: &str = "curve.csv";
pub const CELL_EVAL: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: String,
    pub k: usize,
    pub run_seed: u64,
    pub train_scenes: Vec<String>,
    pub checkpoint_sha256: String,
    pub curve_sha256: String,
    pub eval_sha256: String,
}

pub struct CellOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub curve: Vec<CurveRow>,
    /// Loaded from a sealed directory instead of trained.
    pub resumed: bool,
}

fn load_sealed(dir: &Path, expect_scenes: &[String], k: usize, run_seed: u64) -> Option<CellOutcome> {
    let rec: CellRecord = serde_json::from_slice(&read_file(&dir.join(CELL_FILE)).ok()?).ok()?;
    let hash = |f: &str| sha256_file(&dir.join(f)).ok();
    if rec.train_scenes != expect_scenes
        || rec.k != k
        || rec.run_seed != run_seed
        || hash(CELL_CHECKPOINT)? != rec.checkpoint_sha256
        || hash(CELL_CURVE)? != rec.curve_sha256
        || hash(CELL_EVAL)? != rec.eval_sha256
    {
        return None;
    }
    let report: EvalReport = serde_json::from_slice(&read_file(&dir.join(CELL_EVAL)).ok()?).ok()?;
    let curve = read_csv(&dir.join(CELL_CURVE)).unwrap_or_default();
    Some(CellOutcome { dir: dir.to_path_buf(), report, curve, resumed: true })
}

/// Fine-tunes `init` on `train` with `k` integration steps and evaluates
/// the result on `eval_scenes`, unless `dir` already holds that cell.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &LabConfig,
    init: &FlowPolicy,
    train: &[SceneSpec],
    eval_scenes: &[SceneSpec],
    k: usize,
    run_seed: u64,
    label: &str,
    dir: &Path,
) -> Result<CellOutcome> {
    let ids: Vec<String> = train.iter().map(|s| s.scene_id.clone()).collect();
    if let Some(done) = load_sealed(dir, &ids, k, run_seed) {
        return Ok(done);
    }
    let mut cell_cfg = cfg.clone();
    cell_cfg.finetune.k = k;
    let ckpt_dir = dir.join("checkpoints");
    let seed = finetune_config(&cell_cfg, run_seed).seed;
    let out = finetune_stage(&cell_cfg, init, train, run_seed, |it, p| {
        let meta = CheckpointMeta { stage: "finetune".into(), steps: it as u64, seed };
        save_checkpoint(&ckpt_dir.join(format!("iter_{it:05}.ckpt")), p, &meta)
    })?;
    let meta = CheckpointMeta { stage: "finetune".into(), steps: cell_cfg.finetune.iterations as u64, seed };
    save_checkpoint(&dir.join(CELL_CHECKPOINT), &out.policy, &meta)?;
    write_curve(&dir.join(CELL_CURVE), &out.curve)?;
    let report = evaluate_stage(&cell_cfg, &out.policy, eval_scenes)?;
    write_atomic(&dir.join(CELL_EVAL), &report.to_json()?)?;
    let rec = CellRecord {
        label: label.into(),
        k,
        run_seed,
        train_scenes: ids,
        checkpoint_sha256: sha256_file(&dir.join(CELL_CHECKPOINT))?,
        curve_sha256: sha256_file(&dir.join(CELL_CURVE))?,
        eval_sha256: sha256_file(&dir.join(CELL_EVAL))?,
    };
    let mut bytes = serde_json::to_vec_pretty(&rec)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(CELL_FILE), &bytes)?;
    Ok(CellOutcome { dir: dir.to_path_buf(), report, curve: out.curve, resumed: false })
}

/// One cell of the training-set-size ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub n: usize,
    pub subset: usize,
    pub seed: u64,
    pub id_sr: f64,
    /// `None` when the subset is the whole corpus.
    pub ood_sr: Option<f64>,
    pub all_sr: f64,
    pub gap: Option<f64>,
    pub id_tf: Option<f64>,
    pub ood_tf: Option<f64>,
    pub all_tf: Option<f64>,
    pub id_episodes: usize,
    pub ood_episodes: usize,
    pub all_episodes: usize,
    pub cell: String,
}

/// Per-`N` means and sample standard deviations over subsets and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    pub n: usize,
    pub cells: usize,
    pub id_sr_mean: f64,
    pub id_sr_std: f64,
    pub ood_sr_mean: Option<f64>,
    pub ood_sr_std: Option<f64>,
    pub gap_mean: Option<f64>,
    pub gap_std: Option<f64>,
    pub all_sr_mean: f64,
    pub all_sr_std: f64,
    pub all_tf_mean: Option<f64>,
    pub all_tf_std: Option<f64>,
}

pub struct DiversityTable {
    pub rows: Vec<DiversityRow>,
    pub summary: Vec<DiversitySummary>,
    pub resumed_cells: usize,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

pub fn summarize(rows: &[DiversityRow]) -> Vec<DiversitySummary> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let sel: Vec<&DiversityRow> = rows.iter().filter(|r| r.n == n).collect();
            let col = |f: &dyn Fn(&DiversityRow) -> Option<f64>| -> Option<(f64, f64)> {
                let v: Vec<f64> = sel.iter().filter_map(|r| f(r)).collect();
                mean_std(&v)
            };
            let id = col(&|r| Some(r.id_sr)).unwrap_or((0.0, 0.0));
            let all = col(&|r| Some(r.all_sr)).unwrap_or((0.0, 0.0));
            let ood = col(&|r| r.ood_sr);
            let gap = col(&|r| r.gap);
            let tf = col(&|r| r.all_tf);
            DiversitySummary {
                n,
                cells: sel.len(),
                id_sr_mean: id.0,
                id_sr_std: id.1,
                ood_sr_mean: ood.map(|x| x.0),
                ood_sr_std: ood.map(|x| x.1),
                gap_mean: gap.map(|x| x.0),
                gap_std: gap.map(|x| x.1),
                all_sr_mean: all.0,
                all_sr_std: all.1,
                all_tf_mean: tf.map(|x| x.0),
                all_tf_std: tf.map(|x| x.1),
            }
        })
        .collect()
}

fn ids(scenes: &[SceneSpec], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| scenes[i].scene_id.clone()).collect()
}

pub const DIVERSITY_TABLE: &str = "ablation_n.csv";
pub const DIVERSITY_SUMMARY: &str = "ablation_n_summary.csv";

/// Fine-tunes on the first `N` scenes of each sampled subset `H_i` for every
/// `N` in the ladder and seed, and scores ID (`H_i` prefix), OOD (corpus
/// minus `H_i`) and the whole corpus.
pub fn run_diversity_ablation(
    cfg: &LabConfig,
    corpus: &SceneCorpus,
    init: &FlowPolicy,
    out: &Path,
    progress: &dyn Fn(&str),
) -> Result<DiversityTable> {
    let a = &cfg.ablation;
    let subsets = sample_subsets(corpus.len(), a.subset_size, a.subsets, cfg.seeds().subsets)?;
    let mut rows = Vec::new();
    let mut resumed = 0;
    for (i, subset) in subsets.iter().enumerate() {
        for &seed in &a.seeds {
            for &n in &a.ladder {
                let label = format!("n{n:03}-h{i}-s{seed}");
                let train = corpus.select(subset.prefix(n));
                let cell =
                    run_cell(cfg, init, &train, &corpus.scenes, cfg.finetune.k, seed, &label, &out.join("cells").join(&label))?;
                resumed += cell.resumed as usize;
                let r = &cell.report;
                let id = r.aggregate(&ids(&corpus.scenes, subset.prefix(n)))?;
                let ood = (!subset.complement.is_empty())
                    .then(|| r.aggregate(&ids(&corpus.scenes, &subset.complement)))
                    .transpose()?;
                let all = r.overall();
                progress(&format!(
                    "{label}: ID {:.3} OOD {} all {:.3}{}",
                    id.success_rate,
                    ood.map_or("-".into(), |o| format!("{:.3}", o.success_rate)),
                    all.success_rate,
                    if cell.resumed { " (resumed)" } else { "" }
                ));
                rows.push(DiversityRow {
                    n,
                    subset: i,
                    seed,
                    id_sr: id.success_rate,
                    ood_sr: ood.map(|o| o.success_rate),
                    all_sr: all.success_rate,
                    gap: ood.map(|o| id.success_rate - o.success_rate),
                    id_tf: id.mean_tf,
                    ood_tf: ood.and_then(|o| o.mean_tf),
                    all_tf: all.mean_tf,
                    id_episodes: id.episodes,
                    ood_episodes: ood.map_or(0, |o| o.episodes),
                    all_episodes: all.episodes,
                    cell: format!("cells/{label}"),
                });
            }
        }
    }
    let summary = summarize(&rows);
    write_csv(&out.join(DIVERSITY_TABLE), &rows)?;
    write_csv(&out.join(DIVERSITY_SUMMARY), &summary)?;
    Ok(DiversityTable { rows, summary, resumed_cells: resumed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_tf: Option<f64>,
    pub episodes: usize,
    pub cell: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub k: usize,
    pub samples: usize,
    pub median_seconds: f64,
    pub p10_seconds: f64,
    pub p90_seconds: f64,
}

pub struct KTable {
    pub rows: Vec<KRow>,
    pub latency: Vec<LatencyRow>,
    pub resumed_cells: usize,
}

pub const K_TABLE: &str = "ablation_k.csv";
pub const LATENCY_TABLE: &str = "latency.csv";

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-decision inference latency (`encode` + `sample_stochastic`) for each
/// `K`. Samples are interleaved across `K` so load changes hit every setting
/// alike.
pub fn benchmark_latency(
    policy: &FlowPolicy,
    cfg: &LabConfig,
    scenes: &[SceneSpec],
    ks: &[usize],
    samples: usize,
    warmup: usize,
) -> Result<Vec<LatencyRow>> {
    if scenes.is_empty() || samples == 0 {
        return Err(Error::config("latency benchmark needs scenes and at least one sample"));
    }
    let world = Arc::new(cfg.world.clone());
    let obs = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            reset(Arc::new(s.clone()), world.clone(), &cfg.randomization, stream(cfg.seed, "latency-env", i as u64))
                .map(|(_, o)| o)
        })
        .collect::<Result<Vec<_>>>()?;
    let policies = ks
        .iter()
        .map(|&k| {
            let mut p = policy.clone();
            p.set_k(k).map(|_| p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(cfg.seed, "latency-noise", 0);
    let mut times = vec![Vec::with_capacity(samples); ks.len()];
    for i in 0..warmup + samples {
        for (j, p) in policies.iter().enumerate() {
            let o = &obs[i % obs.len()];
            let t = Instant::now();
            let z = p.encode(o)?;
            let chain = p.sample_stochastic(&z, &mut rng)?;
            let dt = t.elapsed().as_secs_f64();
            std::hint::black_box(chain);
            if i >= warmup {
                times[j].push(dt);
            }
        }
    }
    Ok(ks
        .iter()
        .zip(times)
        .map(|(&k, mut t)| {
            t.sort_by(f64::total_cmp);
            LatencyRow {
                k,
                samples,
                median_seconds: quantile(&t, 0.5),
                p10_seconds: quantile(&t, 0.1),
                p90_seconds: quantile(&t, 0.9),
            }
        })
        .collect())
}

/// Fine-tunes on the whole corpus for each `K` and seed, evaluates at that
/// `K`, and benchmarks inference latency.
pub fn run_k_ablation(cfg: &LabConfig, corpus: &SceneCorpus, init: &FlowPolicy, out: &Path, progress: &dyn Fn(&str)) -> Result<KTable> {
    let a = &cfg.ablation;
    let mut rows = Vec::new();
    let mut resumed = 0;
    for &seed in &a.k_seeds {
        for &k in &a.k_ladder {
            let label = format!("k{k:02}-s{seed}");
            let cell = run_cell(cfg, init, &corpus.scenes, &corpus.scenes, k, seed, &label, &out.join("cells").join(&label))?;
            resumed += cell.resumed as usize;
            let all = cell.report.overall();
            progress(&format!("{label}: SR {:.3}{}", all.success_rate, if cell.resumed { " (resumed)" } else { "" }));
            rows.push(KRow {
                k,
                seed,
                success_rate: all.success_rate,
                mean_tf: all.mean_tf,
                episodes: all.episodes,
                cell: format!("cells/{label}"),
            });
        }
    }
    let latency = benchmark_latency(init, cfg, &corpus.scenes, &a.latency_ks, a.latency_samples, a.latency_warmup)?;
    for l in &latency {
        progress(&format!("K={}: median {:.1} us", l.k, l.median_seconds * 1e6));
    }
    write_csv(&out.join(K_TABLE), &rows)?;
    write_csv(&out.join(LATENCY_TABLE), &latency)?;
    Ok(KTable { rows, latency, resumed_cells: resumed })
}
