//! Analytic gradients against central finite differences.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use flowlab::autodiff::{Activation, Mlp, MlpSpec};
use flowlab::policy::{DenoisingChain, FlowPolicy, FlowWeighting, HiddenState, PolicyConfig};
use flowlab::rng::stream;
use flowlab::scenes::{generate_corpus, CorpusConfig};
use flowlab::spaces::ObsLayout;
use flowlab::world::{reset, DomainRandomizationConfig, WorldConfig};

use crate::{ensure, lift, Verdict};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on this absolute scale, where
/// finite-difference roundoff would otherwise dominate the ratio.
const FLOOR: f64 = 1e-3;

#[derive(Default)]
struct Worst {
    rel: f64,
    checked: usize,
    at: String,
}

impl Worst {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if rel > self.rel || rel.is_nan() {
            self.rel = rel;
            self.at = at();
        }
    }
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn random_mlp(i: u64) -> Mlp {
    let mut rng = stream(1, "grad-nets", i);
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let depth = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
    let spec = MlpSpec {
        input_width: rng.random_range(1..=5),
        activations: (0..depth).map(|_| acts[rng.random_range(0..3)]).collect(),
        layer_widths: widths,
    };
    let mut mlp = Mlp::new("net", spec, &mut rng).unwrap();
    // Nonzero biases so every path is exercised.
    for b in mlp.blocks_mut().iter_mut().skip(1).step_by(2) {
        b.values.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    mlp
}

/// `L = sum(u * f(X))` over a small batch, for parameters and inputs.
fn check_mlp(i: u64, worst: &mut Worst) -> Result<(), String> {
    let mut mlp = random_mlp(i);
    let mut rng = stream(2, "grad-inputs", i);
    let batch = 3;
    let inw = mlp.spec().input_width;
    let outw = mlp.spec().output_width();
    let x: Vec<f64> = (0..batch * inw).map(|_| rng.sample(StandardNormal)).collect();
    let u: Vec<f64> = (0..batch * outw).map(|_| rng.sample(StandardNormal)).collect();
    let loss = |m: &Mlp, x: &[f64]| -> f64 {
        m.predict_batch(x, batch).unwrap().iter().zip(&u).map(|(y, w)| y * w).sum()
    };
    mlp.zero_grad();
    let (_, tape) = lift(mlp.forward_batch(&x, batch))?;
    let gx = lift(mlp.backward(&tape, &u))?;
    let analytic: Vec<Vec<f64>> = mlp.blocks().iter().map(|b| b.grad.clone()).collect();
    for (bi, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let base = mlp.blocks()[bi].values[j];
            let numeric = central(|h| {
                mlp.blocks_mut()[bi].values[j] = base + h;
                loss(&mlp, &x)
            });
            mlp.blocks_mut()[bi].values[j] = base;
            worst.record(grads[j], numeric, || format!("net {i} {}[{j}]", mlp.blocks()[bi].name));
        }
    }
    for j in 0..x.len() {
        let numeric = central(|h| {
            let mut xp = x.clone();
            xp[j] += h;
            loss(&mlp, &xp)
        });
        worst.record(gx[j], numeric, || format!("net {i} input[{j}]"));
    }
    Ok(())
}

struct Fixture {
    policy: FlowPolicy,
    obs: Vec<f64>,
    chains: Vec<DenoisingChain>,
    /// Per-record weights on log-probability and value.
    c_logp: Vec<f64>,
    c_value: Vec<f64>,
}

fn fixture() -> Fixture {
    let layout = ObsLayout::default();
    let cfg = PolicyConfig {
        integration_steps: 2,
        encoder_hidden: vec![6],
        latent_dim: 4,
        head_hidden: vec![5],
        // A wide clamp keeps the noise head's tanh away from saturation.
        log_std_min: -1.5,
        log_std_max: 0.0,
        ..PolicyConfig::default()
    };
    let mut rng = stream(3, "grad-policy", 0);
    let mut policy = FlowPolicy::new(cfg, layout, &mut rng).unwrap();
    for b in policy.blocks_mut() {
        b.values.iter_mut().for_each(|v| *v += 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let corpus = generate_corpus(3, 4, &CorpusConfig::default()).unwrap();
    let world = Arc::new(WorldConfig::default());
    let mut obs = Vec::new();
    let mut chains = Vec::new();
    for (i, scene) in corpus.scenes.iter().enumerate() {
        let (_, o) = reset(Arc::new(scene.clone()), world.clone(), &DomainRandomizationConfig::default(), stream(5, "env", i as u64))
            .unwrap();
        let flat = o.flatten(&layout).unwrap();
        let z = policy.encode_flat(&flat).unwrap();
        chains.push(policy.sample_stochastic(&z, &mut rng).unwrap());
        obs.extend(flat);
    }
    let n = chains.len();
    let c_logp = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let c_value = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Fixture { policy, obs, chains, c_logp, c_value }
}

/// Independent objective: log-densities rebuilt from per-head predictions,
/// with the noise and value heads reading `z_sg` and the velocity head `z`.
fn objective(f: &Fixture, p: &FlowPolicy, z_sg: &[HiddenState]) -> f64 {
    let w = p.layout.width();
    let dt = 1.0 / p.k() as f64;
    let mut total = 0.0;
    for (b, chain) in f.chains.iter().enumerate() {
        let z = p.encode_flat(&f.obs[b * w..(b + 1) * w]).unwrap();
        let mut lp: f64 = chain.chunk(0).iter().map(|x| flowlab::policy::normal_logpdf(*x, 0.0, 1.0)).sum();
        for step in 0..chain.steps {
            let a = chain.chunk(step);
            let tau = step as f64 * dt;
            let v = p.velocity_at(a, &z, tau).unwrap();
            let ls = p.log_std_at(a, &z_sg[b], tau).unwrap();
            for i in 0..a.len() {
                lp += flowlab::policy::normal_logpdf(chain.chunk(step + 1)[i], a[i] + v[i] * dt, ls[i].exp());
            }
        }
        total += f.c_logp[b] * lp + f.c_value[b] * p.value(&z_sg[b]).unwrap();
    }
    total
}

fn check_policy_heads(worst: &mut Worst) -> Result<Vec<&'static str>, String> {
    let mut f = fixture();
    let w = f.policy.layout.width();
    let z_sg: Vec<HiddenState> =
        (0..f.chains.len()).map(|b| f.policy.encode_flat(&f.obs[b * w..(b + 1) * w]).unwrap()).collect();
    f.policy.zero_grad();
    let refs: Vec<&DenoisingChain> = f.chains.iter().collect();
    let eval = lift(f.policy.evaluate_minibatch(&f.obs, &refs))?;
    lift(f.policy.backward_minibatch(&eval.tape, &f.c_logp, &f.c_value, true))?;
    drop(eval);
    let mut p = f.policy.clone();
    let analytic: Vec<Vec<f64>> = p.blocks().map(|b| b.grad.clone()).collect();
    let names: Vec<String> = p.blocks().map(|b| b.name.clone()).collect();
    let mut covered = Vec::new();
    for (bi, grads) in analytic.iter().enumerate() {
        let head = names[bi].split('.').next().unwrap_or("").to_string();
        for j in 0..grads.len() {
            let base = p.blocks().nth(bi).unwrap().values[j];
            let numeric = central(|h| {
                p.blocks_mut()[bi].values[j] = base + h;
                // Encoder perturbations must not reach the stop-gradient inputs.
                objective(&f, &p, &z_sg)
            });
            p.blocks_mut()[bi].values[j] = base;
            worst.record(grads[j], numeric, || format!("{}[{j}]", names[bi]));
        }
        for h in ["encoder", "velocity", "noise", "value"] {
            if head == h && !covered.contains(&h) {
                covered.push(h);
            }
        }
    }
    Ok(covered)
}

/// Imitation loss gradients for the encoder and velocity head.
fn check_flow_loss(worst: &mut Worst) -> Result<(), String> {
    let f = fixture();
    let mut p = f.policy.clone();
    let mut rng = stream(6, "grad-flow", 0);
    let n = f.chains.len();
    let width = p.flat_action();
    let targets: Vec<f64> = (0..n * width).map(|_| rng.sample(StandardNormal)).collect();
    let eps: Vec<f64> = (0..n * width).map(|_| rng.sample(StandardNormal)).collect();
    let taus: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.95)).collect();
    for weighting in [FlowWeighting::Velocity, FlowWeighting::CleanChunk] {
        p.zero_grad();
        lift(p.weighted_flow_loss(&f.obs, &targets, &eps, &taus, weighting, true))?;
        let analytic: Vec<Vec<f64>> = p.blocks().map(|b| b.grad.clone()).collect();
        let names: Vec<String> = p.blocks().map(|b| b.name.clone()).collect();
        for (bi, grads) in analytic.iter().enumerate() {
            if !(names[bi].starts_with("encoder") || names[bi].starts_with("velocity")) {
                continue;
            }
            for j in 0..grads.len() {
                let base = p.blocks().nth(bi).unwrap().values[j];
                let numeric = central(|h| {
                    p.blocks_mut()[bi].values[j] = base + h;
                    p.weighted_flow_loss(&f.obs, &targets, &eps, &taus, weighting, false).unwrap()
                });
                p.blocks_mut()[bi].values[j] = base;
                worst.record(grads[j], numeric, || format!("flow loss ({weighting:?}) {}[{j}]", names[bi]));
            }
        }
    }
    Ok(())
}

pub fn run() -> Verdict {
    let mut nets = Worst::default();
    for i in 0..20 {
        check_mlp(i, &mut nets)?;
    }
    let mut heads = Worst::default();
    let covered = check_policy_heads(&mut heads)?;
    check_flow_loss(&mut heads)?;
    ensure(covered.len() == 4, || format!("only heads {covered:?} were checked"))?;
    let detail = format!(
        "20 nets: max rel err {:.2e} over {} entries; 4 heads: max rel err {:.2e} over {} entries",
        nets.rel, nets.checked, heads.rel, heads.checked
    );
    ensure(nets.rel <= TOLERANCE, || format!("{detail}; worst at {}", nets.at))?;
    ensure(heads.rel <= TOLERANCE, || format!("{detail}; worst at {}", heads.at))?;
    Ok(detail)
}
