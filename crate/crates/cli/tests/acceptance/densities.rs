//! Chain log-densities against closed forms and a Monte Carlo normalization.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use flowlab::policy::{DenoisingChain, FlowPolicy, HiddenState, PolicyConfig};
use flowlab::rng::stream;
use flowlab::spaces::ObsLayout;

use crate::{ensure, lift, Verdict};

const CHAINS: usize = 1000;
const TOLERANCE: f64 = 1e-9;
const MC_SAMPLES: usize = 1_000_000;

fn policy(cfg: PolicyConfig, seed: u64) -> FlowPolicy {
    let mut rng = stream(seed, "density-policy", 0);
    let mut p = FlowPolicy::new(cfg, ObsLayout::default(), &mut rng).unwrap();
    // Move the noise head off its constant initialization.
    for b in p.noise.blocks_mut() {
        b.values.iter_mut().for_each(|v| *v += 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    p
}

fn random_state(p: &FlowPolicy, rng: &mut impl Rng) -> HiddenState {
    let obs: Vec<f64> = (0..p.layout.width()).map(|_| rng.sample(StandardNormal)).collect();
    p.encode_flat(&obs).unwrap()
}

/// A chain either sampled from the policy or with arbitrary entries.
fn random_chain(p: &FlowPolicy, z: &HiddenState, i: usize, rng: &mut impl Rng) -> DenoisingChain {
    let mut c = p.sample_stochastic(z, rng).unwrap();
    if i % 2 == 1 {
        c.chunks.iter_mut().for_each(|v| *v = 2.0 * rng.sample::<f64, _>(StandardNormal));
    }
    c
}

/// `log N(x; mu, diag(sigma^2))` in matrix form: quadratic form plus
/// log-determinant.
fn mvn_logpdf(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let n = x.len() as f64;
    let quad: f64 = x.iter().zip(mu).zip(sigma).map(|((x, m), s)| ((x - m) / s).powi(2)).sum();
    let logdet: f64 = sigma.iter().map(|s| 2.0 * s.ln()).sum();
    -0.5 * (quad + logdet + n * (2.0 * PI).ln())
}

/// K = 1: `A^1 | A^0` is Gaussian around one Euler step of the ODE.
fn closed_form_k1(p: &FlowPolicy, c: &DenoisingChain, z: &HiddenState) -> f64 {
    let a0 = c.chunk(0);
    let v = p.velocity_at(a0, z, 0.0).unwrap();
    let mu: Vec<f64> = a0.iter().zip(&v).map(|(a, v)| a + v).collect();
    let sigma: Vec<f64> = p.log_std_at(a0, z, 0.0).unwrap().iter().map(|l| l.exp()).collect();
    mvn_logpdf(a0, &vec![0.0; a0.len()], &vec![1.0; a0.len()]) + mvn_logpdf(c.chunk(1), &mu, &sigma)
}

fn entry_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    -(x - mean).powi(2) / (2.0 * std * std) - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// Sum of per-step, per-entry transition densities.
fn step_sum(p: &FlowPolicy, c: &DenoisingChain, z: &HiddenState) -> f64 {
    let dt = 1.0 / c.steps as f64;
    let mut lp: f64 = c.chunk(0).iter().map(|&x| entry_logpdf(x, 0.0, 1.0)).sum();
    for k in 0..c.steps {
        let a = c.chunk(k);
        let tau = k as f64 * dt;
        let v = p.velocity_at(a, z, tau).unwrap();
        let ls = p.log_std_at(a, z, tau).unwrap();
        for i in 0..a.len() {
            lp += entry_logpdf(c.chunk(k + 1)[i], a[i] + dt * v[i], ls[i].exp());
        }
    }
    lp
}

fn oracle_gap(k: usize, oracle: fn(&FlowPolicy, &DenoisingChain, &HiddenState) -> f64) -> Result<f64, String> {
    let cfg = PolicyConfig { integration_steps: k, encoder_hidden: vec![16], latent_dim: 8, head_hidden: vec![16], ..PolicyConfig::default() };
    let p = policy(cfg, k as u64);
    let mut rng = stream(20 + k as u64, "density-chains", 0);
    let mut worst: f64 = 0.0;
    for i in 0..CHAINS {
        let z = random_state(&p, &mut rng);
        let c = random_chain(&p, &z, i, &mut rng);
        let got = lift(p.log_prob(&c, &z))?;
        let want = oracle(&p, &c, &z);
        worst = worst.max((got - want).abs());
        if i % 2 == 0 {
            worst = worst.max((c.log_prob - want).abs());
        }
    }
    Ok(worst)
}

/// `E_q[p/q]` with `q = N(0, 1)` for `A^0` and a wide Gaussian for `A^1`.
fn mc_normalization() -> Result<(f64, f64), String> {
    let cfg = PolicyConfig {
        chunk_len: 1,
        action_dim: 1,
        integration_steps: 1,
        encoder_hidden: vec![8],
        latent_dim: 4,
        head_hidden: vec![8],
        log_std_min: -1.0,
        log_std_max: 0.0,
        ..PolicyConfig::default()
    };
    let p = policy(cfg, 99);
    let mut rng = stream(30, "density-mc", 0);
    let z = random_state(&p, &mut rng);
    let q_std = 3.0;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..MC_SAMPLES {
        let a0: f64 = rng.sample(StandardNormal);
        let a1: f64 = q_std * rng.sample::<f64, _>(StandardNormal);
        let chain = DenoisingChain { steps: 1, width: 1, chunks: vec![a0, a1], means: vec![], stds: vec![], log_prob: 0.0 };
        let log_q = entry_logpdf(a0, 0.0, 1.0) + entry_logpdf(a1, 0.0, q_std);
        let w = (lift(p.log_prob(&chain, &z))? - log_q).exp();
        sum += w;
        sum_sq += w * w;
    }
    let n = MC_SAMPLES as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    Ok((mean, se))
}

pub fn run() -> Verdict {
    let gap1 = oracle_gap(1, closed_form_k1)?;
    let gap4 = oracle_gap(4, step_sum)?;
    let (mass, se) = mc_normalization()?;
    let detail =
        format!("K=1 max |err| {gap1:.2e}, K=4 max |err| {gap4:.2e} over {CHAINS} chains each; MC mass {mass:.4} (se {se:.4})");
    ensure(gap1 <= TOLERANCE && gap4 <= TOLERANCE, || detail.clone())?;
    ensure((mass - 1.0).abs() <= 0.01, || detail.clone())?;
    Ok(detail)
}
