//! With s = 1 and K = 1 the chain ratio is the ordinary Gaussian PPO ratio.

use rand::Rng;
use rand_distr::StandardNormal;

use flowlab::policy::{DenoisingChain, FlowPolicy, PolicyConfig};
use flowlab::ppo::{collect_rollouts, minibatch_loss, scaled_ratio, TrainConfig, VecEnv};
use flowlab::rng::stream;
use flowlab::scenes::{generate_corpus, CorpusConfig};
use flowlab::spaces::ObsLayout;
use flowlab::world::{DomainRandomizationConfig, WorldConfig};

use crate::{ensure, lift, Verdict};

const RECORDS: usize = 1000;

fn k1_policy(seed: u64) -> FlowPolicy {
    let cfg =
        PolicyConfig { integration_steps: 1, encoder_hidden: vec![16], latent_dim: 8, head_hidden: vec![16], ..PolicyConfig::default() };
    FlowPolicy::new(cfg, ObsLayout::default(), &mut stream(seed, "ratio-policy", 0)).unwrap()
}

/// `pi_new(a | o) / pi_old(a | o)` for the one-step Gaussian action
/// distribution given `A^0`, written as a product of density ratios.
fn gaussian_ratio(new: &FlowPolicy, old: &FlowPolicy, obs: &[f64], c: &DenoisingChain) -> f64 {
    let density = |p: &FlowPolicy| -> Vec<f64> {
        let z = p.encode_flat(obs).unwrap();
        let a0 = c.chunk(0);
        let v = p.velocity_at(a0, &z, 0.0).unwrap();
        let ls = p.log_std_at(a0, &z, 0.0).unwrap();
        (0..a0.len())
            .map(|i| {
                let s = ls[i].exp();
                let u = (c.chunk(1)[i] - a0[i] - v[i]) / s;
                (-0.5 * u * u).exp() / s
            })
            .collect()
    };
    density(new).iter().zip(density(old)).map(|(n, o)| n / o).product()
}

pub fn run() -> Verdict {
    let old = k1_policy(1);
    let mut new = old.clone();
    let mut rng = stream(2, "ratio-perturb", 0);
    for b in new.blocks_mut() {
        b.values.iter_mut().for_each(|v| *v += 0.005 * rng.sample::<f64, _>(StandardNormal));
    }
    let width = old.layout.width();
    let mut obs = Vec::with_capacity(RECORDS * width);
    let mut chains = Vec::with_capacity(RECORDS);
    for _ in 0..RECORDS {
        let o: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        let z = old.encode_flat(&o).unwrap();
        chains.push(old.sample_stochastic(&z, &mut rng).unwrap());
        obs.extend(o);
    }
    let refs: Vec<&DenoisingChain> = chains.iter().collect();
    let eval = lift(new.evaluate_minibatch(&obs, &refs))?;
    let mut worst: f64 = 0.0;
    let mut spread: (f64, f64) = (f64::INFINITY, 0.0);
    for (i, c) in chains.iter().enumerate() {
        let r = lift(scaled_ratio(eval.log_probs[i], c.log_prob, 1.0))?;
        let want = gaussian_ratio(&new, &old, &obs[i * width..(i + 1) * width], c);
        worst = worst.max((r - want).abs() / want.max(1.0));
        spread = (spread.0.min(want), spread.1.max(want));
    }
    ensure(worst <= 1e-12, || format!("max ratio error {worst:.2e}"))?;
    ensure(spread.1 - spread.0 > 1e-3, || "perturbation left every ratio at 1".into())?;

    // On-policy: a fresh rollout re-evaluated by the policy that collected it.
    let scenes = generate_corpus(4, 3, &CorpusConfig::default()).unwrap().scenes;
    let mut venv = lift(VecEnv::new(&scenes, &WorldConfig::default(), &DomainRandomizationConfig::default(), 8, 5))?;
    let batch = lift(collect_rollouts(&old, &mut venv, 10))?;
    let refs: Vec<&DenoisingChain> = batch.chains.iter().collect();
    let again = lift(old.evaluate_minibatch(&batch.observations, &refs))?;
    let cfg = TrainConfig { ratio_scale: 1.0, ..TrainConfig::default() };
    let n = batch.len();
    let loss = lift(minibatch_loss(&again.log_probs, &again.values, &batch.old_log_probs, &vec![1.0; n], &batch.values, &cfg))?;
    let on_policy = loss.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    ensure(on_policy <= 1e-9, || format!("on-policy ratio deviates by {on_policy:.2e}"))?;
    ensure(loss.clip_fraction == 0.0, || format!("on-policy clip fraction {}", loss.clip_fraction))?;
    Ok(format!(
        "{RECORDS} records: max ratio error {worst:.2e} (ratios {:.3}..{:.3}); {n} on-policy records: max |r-1| {on_policy:.2e}, clip fraction 0",
        spread.0, spread.1
    ))
}
