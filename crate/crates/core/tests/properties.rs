use proptest::prelude::*;
use rand::Rng;

use flowlab::container::{Container, NamedArray};
use flowlab::ppo::{clipped_surrogate, compute_gae, scaled_ratio};
use flowlab::rng::stream;
use flowlab::scenes::{parse_task, render, sample_instruction};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gae_returns_are_advantages_plus_values(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..30),
        seed in any::<u64>(),
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let n = rewards.len();
        let mut rng = stream(seed, "gae", 0);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.2).collect();
        let last = rng.random_range(-1.0..1.0);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, last, gamma, lambda).unwrap();
        for t in 0..n {
            prop_assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
        }
        // The final step's advantage is its one-step TD error.
        let next = if dones[n - 1] { 0.0 } else { last };
        prop_assert!((adv[n - 1] - (rewards[n - 1] + gamma * next - values[n - 1])).abs() < 1e-12);
    }

    #[test]
    fn scaled_ratio_is_monotone_and_one_on_policy(lp in -50.0f64..50.0, d in 0.0f64..5.0, s in 0.01f64..=1.0) {
        prop_assert_eq!(scaled_ratio(lp, lp, s).unwrap(), 1.0);
        prop_assert!(scaled_ratio(lp + d, lp, s).unwrap() >= scaled_ratio(lp, lp, s).unwrap());
        let r = scaled_ratio(lp + d, lp, s).unwrap();
        prop_assert!((r.ln() - s * d).abs() < 1e-9);
    }

    #[test]
    fn clipped_objective_never_exceeds_unclipped(r in 0.0f64..3.0, a in -3.0f64..3.0, eps in 0.05f64..0.5) {
        let (obj, _) = clipped_surrogate(r, a, eps);
        prop_assert!(obj <= r * a + 1e-15);
    }

    #[test]
    fn sampled_instructions_round_trip(seed in any::<u64>()) {
        let text = sample_instruction(&mut stream(seed, "instr", 0));
        let g = parse_task(&text).unwrap();
        prop_assert_eq!(render(&parse_task(&render(&g)).unwrap()), render(&g));
    }

    #[test]
    fn container_round_trips_bits(values in prop::collection::vec(any::<f64>(), 0..40)) {
        let c = Container {
            header: "{}".into(),
            arrays: vec![NamedArray { name: "x".into(), rows: 1, cols: values.len(), values: values.clone() }],
        };
        let back = Container::decode(&c.encode(b"TESTMAG\0"), b"TESTMAG\0", "mem").unwrap();
        let got = &back.get("x").unwrap().values;
        prop_assert_eq!(got.len(), values.len());
        for (a, b) in got.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
