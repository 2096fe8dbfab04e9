use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use flowlab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use flowlab::harness::ablation::{
    CELL_CHECKPOINT, CELL_CURVE, CELL_EVAL, DIVERSITY_SUMMARY, DIVERSITY_TABLE, K_TABLE, LATENCY_TABLE,
};
use flowlab::harness::pipeline::{evaluate_stage, finetune_config, finetune_stage, pretrain_config, pretrain_stage, scene_corpus};
use flowlab::harness::report::{eval_rows, write_curve};
use flowlab::harness::{emit_plots, run_diversity_ablation, run_k_ablation, write_csv, LabConfig, Manifest};
use flowlab::scenes::{SceneCorpus, SceneSpec};

use crate::{Cli, Command, Global};

/// Bad arguments discovered after parsing; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `CORPUS`, `CORPUS#A..B` (end exclusive), `CORPUS#A..=B` or `CORPUS#I,J,K`.
pub fn parse_scene_arg(arg: &str) -> Result<(PathBuf, Option<Vec<usize>>)> {
    let Some((path, sel)) = arg.rsplit_once('#') else {
        return Ok((PathBuf::from(arg), None));
    };
    let bad = || usage(format!("bad scene selection '{sel}' in '{arg}'; expected A..B, A..=B or I,J,K"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let idx = if let Some((a, b)) = sel.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = sel.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        sel.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if idx.is_empty() {
        return Err(usage(format!("scene selection '{sel}' is empty")));
    }
    Ok((PathBuf::from(path), Some(idx)))
}

fn load_scenes(arg: &str, manifest: &mut Manifest) -> Result<Vec<SceneSpec>> {
    let (path, idx) = parse_scene_arg(arg)?;
    let corpus = SceneCorpus::load(&path).with_context(|| format!("loading scenes from {}", path.display()))?;
    manifest.add_input(&path)?;
    match idx {
        None => Ok(corpus.scenes),
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= corpus.len()) {
                return Err(usage(format!("scene index {bad} out of range for {} ({} scenes)", path.display(), corpus.len())));
            }
            Ok(corpus.select(&idx))
        }
    }
}

fn load_config(g: &Global) -> Result<LabConfig> {
    let mut cfg = match &g.config {
        Some(p) => LabConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => LabConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(msg: &str) {
    eprintln!("[flowlab] {msg}");
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let mut cfg = load_config(g)?;
    let out = g.out.as_path();
    let mut manifest = Manifest::new(argv, &cfg);
    if let Some(p) = &g.config {
        manifest.add_input(p)?;
    }
    match cli.command {
        Command::GenScenes { n } => {
            let n = n.unwrap_or(cfg.corpus.n_scenes);
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let corpus = scene_corpus(&cfg, n)?;
            corpus.save(&out.join("corpus.json"))?;
            manifest.add_artifact(out, "corpus.json")?;
            log(&format!(
                "{} scenes, {:.2} attempts per accepted scene",
                corpus.len(),
                corpus.metrics.avg_attempts
            ));
        }
        Command::Pretrain => {
            let pre = pretrain_stage(&cfg)?;
            let pc = pretrain_config(&cfg);
            pre.corpus.save(&out.join("pretrain_corpus.json"))?;
            pre.demos.save(&out.join("demos.bin"))?;
            let meta = CheckpointMeta { stage: "pretrain".into(), steps: pc.steps as u64, seed: pc.seed };
            save_checkpoint(&out.join("pi_pre.ckpt"), &pre.policy, &meta)?;
            let rows: Vec<LossRow> = pre.log.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
            write_csv(&out.join("pretrain_loss.csv"), &rows)?;
            for f in ["pretrain_corpus.json", "demos.bin", "pi_pre.ckpt", "pretrain_loss.csv"] {
                manifest.add_artifact(out, f)?;
            }
            log(&format!(
                "{} demo records from {} scenes; final loss {:.4}",
                pre.demos.len(),
                pre.corpus.len(),
                pre.log.losses.last().copied().unwrap_or(f64::NAN)
            ));
        }
        Command::Finetune { init, scenes, run_seed, iterations } => {
            if let Some(it) = iterations {
                cfg.finetune.iterations = it;
                manifest.config.finetune.iterations = it;
            }
            let scenes = load_scenes(&scenes, &mut manifest)?;
            let (policy, _) = load_checkpoint(&init)?;
            manifest.add_input(&init)?;
            let seed = finetune_config(&cfg, run_seed).seed;
            let mut saved = Vec::new();
            let outcome = finetune_stage(&cfg, &policy, &scenes, run_seed, |it, p| {
                let rel = format!("checkpoints/iter_{it:05}.ckpt");
                save_checkpoint(&out.join(&rel), p, &CheckpointMeta { stage: "finetune".into(), steps: it as u64, seed })?;
                log(&format!("iteration {it}: checkpoint written"));
                saved.push(rel);
                Ok(())
            })?;
            let meta = CheckpointMeta { stage: "finetune".into(), steps: cfg.finetune.iterations as u64, seed };
            save_checkpoint(&out.join("policy.ckpt"), &outcome.policy, &meta)?;
            write_curve(&out.join("curve.csv"), &outcome.curve)?;
            for f in saved.iter().map(String::as_str).chain(["policy.ckpt", "curve.csv"]) {
                manifest.add_artifact(out, f)?;
            }
            if let Some(last) = outcome.curve.last() {
                log(&format!("{} iterations; last training success rate {:.3}", last.iteration, last.success_rate));
            }
        }
        Command::Eval { checkpoint, scenes, episodes, k } => {
            if let Some(e) = episodes {
                cfg.eval.episodes_per_scene = e;
                manifest.config.eval.episodes_per_scene = e;
            }
            let scenes = load_scenes(&scenes, &mut manifest)?;
            let (mut policy, _) = load_checkpoint(&checkpoint)?;
            manifest.add_input(&checkpoint)?;
            if let Some(k) = k {
                policy.set_k(k).map_err(|e| usage(e.to_string()))?;
            }
            let report = evaluate_stage(&cfg, &policy, &scenes)?;
            flowlab::artifact::write_atomic(&out.join("eval.json"), &report.to_json()?)?;
            write_csv(&out.join("eval.csv"), &eval_rows(&report))?;
            manifest.add_artifact(out, "eval.json")?;
            manifest.add_artifact(out, "eval.csv")?;
            let all = report.overall();
            log(&format!(
                "SR {:.3} over {} episodes; mean TF {}",
                all.success_rate,
                all.episodes,
                all.mean_tf.map_or("-".into(), |t| format!("{t:.2} s"))
            ));
        }
        Command::AblateN { corpus, init } => {
            let (c, p) = prerequisites(&corpus, &init, &mut manifest)?;
            let t = run_diversity_ablation(&cfg, &c, &p, out, &log)?;
            for r in &t.rows {
                add_cell(&mut manifest, out, &r.cell)?;
            }
            manifest.add_artifact(out, DIVERSITY_TABLE)?;
            manifest.add_artifact(out, DIVERSITY_SUMMARY)?;
            for s in &t.summary {
                log(&format!(
                    "N={}: ID {:.3} OOD {} gap {}",
                    s.n,
                    s.id_sr_mean,
                    s.ood_sr_mean.map_or("-".into(), |v| format!("{v:.3}")),
                    s.gap_mean.map_or("-".into(), |v| format!("{v:.3}"))
                ));
            }
        }
        Command::AblateK { corpus, init } => {
            let (c, p) = prerequisites(&corpus, &init, &mut manifest)?;
            let t = run_k_ablation(&cfg, &c, &p, out, &log)?;
            for r in &t.rows {
                add_cell(&mut manifest, out, &r.cell)?;
            }
            manifest.add_artifact(out, K_TABLE)?;
            manifest.add_artifact(out, LATENCY_TABLE)?;
        }
        Command::Plot { curves, summary } => {
            for p in curves.iter().chain(summary.as_ref()) {
                manifest.add_input(p)?;
            }
            if curves.is_empty() && summary.is_none() {
                return Err(usage("plot needs --curves and/or --summary"));
            }
            let written = emit_plots(&curves, summary.as_deref(), out)?;
            for w in &written {
                let rel = w.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                manifest.add_artifact(out, &rel)?;
                log(&format!("wrote {}", w.display()));
            }
        }
    }
    manifest.write(out)?;
    Ok(())
}

fn prerequisites(corpus: &Path, init: &Path, manifest: &mut Manifest) -> Result<(SceneCorpus, flowlab::policy::FlowPolicy)> {
    let c = SceneCorpus::load(corpus).context("the ablation needs a corpus from gen-scenes")?;
    let (p, _) = load_checkpoint(init).context("the ablation needs an initial checkpoint from pretrain")?;
    manifest.add_input(corpus)?;
    manifest.add_input(init)?;
    Ok((c, p))
}

fn add_cell(manifest: &mut Manifest, out: &Path, cell: &str) -> Result<()> {
    for f in [CELL_CHECKPOINT, CELL_CURVE, CELL_EVAL] {
        manifest.add_artifact(out, &format!("{cell}/{f}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_selections_parse() {
        assert_eq!(parse_scene_arg("c.json").unwrap(), (PathBuf::from("c.json"), None));
        assert_eq!(parse_scene_arg("c.json#0..3").unwrap().1, Some(vec![0, 1, 2]));
        assert_eq!(parse_scene_arg("c.json#2..=3").unwrap().1, Some(vec![2, 3]));
        assert_eq!(parse_scene_arg("d/c.json#4, 1").unwrap(), (PathBuf::from("d/c.json"), Some(vec![4, 1])));
        for bad in ["c.json#", "c.json#a..2", "c.json#3..1", "c.json#1,,2"] {
            let e = parse_scene_arg(bad).unwrap_err();
            assert!(e.downcast_ref::<UsageError>().is_some(), "{bad}");
        }
    }
}
