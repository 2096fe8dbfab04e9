//! Training trends at the default configuration: fine-tuning gain, the
//! training-set-size ablation, and the integration-step ablation.

use flowlab::harness::pipeline::{evaluate_stage, finetune_stage, pretrain_stage, scene_corpus};
use flowlab::harness::{run_diversity_ablation, run_k_ablation, LabConfig};
use flowlab::policy::FlowPolicy;

use crate::{ensure, lift, Verdict};

/// The imitation policy, trained once and reused by every training criterion.
#[derive(Default)]
pub struct Shared {
    pretrained: Option<FlowPolicy>,
}

impl Shared {
    fn pi_pre(&mut self, cfg: &LabConfig) -> Result<FlowPolicy, String> {
        if self.pretrained.is_none() {
            self.pretrained = Some(lift(pretrain_stage(cfg))?.policy);
        }
        Ok(self.pretrained.clone().unwrap())
    }
}

fn quiet(_: &str) {}

fn tf(v: Option<f64>) -> String {
    v.map_or("-".into(), |t| format!("{t:.2}s"))
}

pub fn improvement(shared: &mut Shared) -> Verdict {
    let cfg = LabConfig::default();
    let init = shared.pi_pre(&cfg)?;
    let scenes = lift(scene_corpus(&cfg, 20))?.scenes;
    // The imitation baseline counts at its own K and at the fine-tuning K,
    // whichever scores higher.
    let mut at_k = init.clone();
    lift(at_k.set_k(cfg.finetune.k))?;
    let before = [lift(evaluate_stage(&cfg, &init, &scenes))?.overall(), lift(evaluate_stage(&cfg, &at_k, &scenes))?.overall()];
    let base = if before[1].success_rate > before[0].success_rate { &before[1] } else { &before[0] };
    let tuned = lift(finetune_stage(&cfg, &init, &scenes, 0, |_, _| Ok(())))?.policy;
    let after = lift(evaluate_stage(&cfg, &tuned, &scenes))?.overall();
    let gain = after.success_rate - base.success_rate;
    let detail = format!(
        "ID SR {:.3} -> {:.3} (+{:.1} pp); mean TF {} -> {}",
        base.success_rate,
        after.success_rate,
        100.0 * gain,
        tf(base.mean_tf),
        tf(after.mean_tf)
    );
    ensure(gain >= 0.30, || detail.clone())?;
    let tf_ok = match (base.mean_tf, after.mean_tf) {
        (Some(b), Some(a)) => a <= b,
        (None, Some(_)) => true,
        _ => false,
    };
    ensure(tf_ok, || detail.clone())?;
    Ok(detail)
}

pub fn diversity(shared: &mut Shared) -> Verdict {
    let cfg = LabConfig::default();
    let init = shared.pi_pre(&cfg)?;
    let corpus = lift(scene_corpus(&cfg, cfg.corpus.n_scenes))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = lift(run_diversity_ablation(&cfg, &corpus, &init, dir.path(), &quiet))?;
    let at = |n: usize| t.summary.iter().find(|s| s.n == n).ok_or(format!("no summary row for N={n}"));
    let (s1, s16) = (at(1)?, at(16)?);
    let (ood1, ood16) = (s1.ood_sr_mean.ok_or("no OOD at N=1")?, s16.ood_sr_mean.ok_or("no OOD at N=16")?);
    let (gap1, gap16) = (s1.gap_mean.ok_or("no gap at N=1")?, s16.gap_mean.ok_or("no gap at N=16")?);
    let detail = format!(
        "{} cells on {} scenes; OOD SR {ood1:.3} (N=1) -> {ood16:.3} (N=16); ID-OOD gap {gap1:.3} -> {gap16:.3}",
        t.rows.len(),
        corpus.len()
    );
    ensure(ood16 >= ood1 + 0.10, || detail.clone())?;
    ensure(gap16 <= 0.5 * gap1, || detail.clone())?;
    Ok(detail)
}

pub fn k_ablation(shared: &mut Shared) -> Verdict {
    let cfg = LabConfig::default();
    let init = shared.pi_pre(&cfg)?;
    let corpus = lift(scene_corpus(&cfg, cfg.corpus.n_scenes))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = lift(run_k_ablation(&cfg, &corpus, &init, dir.path(), &quiet))?;
    let lat: Vec<(usize, f64)> = t.latency.iter().map(|l| (l.k, l.median_seconds)).collect();
    let lat_of = |k: usize| lat.iter().find(|l| l.0 == k).map(|l| l.1).ok_or(format!("no latency for K={k}"));
    let mean_sr = |k: usize| {
        let rows: Vec<f64> = t.rows.iter().filter(|r| r.k == k).map(|r| r.success_rate).collect();
        if rows.is_empty() { Err(format!("no K={k} runs")) } else { Ok(rows.iter().sum::<f64>() / rows.len() as f64) }
    };
    let (sr1, sr4) = (mean_sr(1)?, mean_sr(4)?);
    let detail = format!(
        "SR {sr1:.3} (K=1) vs {sr4:.3} (K=4); median latency {}",
        lat.iter().map(|(k, s)| format!("K={k} {:.1}us", s * 1e6)).collect::<Vec<_>>().join(", ")
    );
    ensure(lat.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), || format!("latency not monotone: {detail}"))?;
    ensure(lat_of(1)? <= 0.5 * lat_of(4)?, || detail.clone())?;
    ensure(sr1 >= sr4 - 0.05, || detail.clone())?;
    Ok(detail)
}
