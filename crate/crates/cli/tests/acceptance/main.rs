//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits non-zero if any failed.
//!
//! `FLOWLAB_ACCEPTANCE=1,3,8` restricts the run to the listed criteria.

mod determinism;
mod densities;
mod gradients;
mod predicate;
mod qa;
mod ratios;
mod training;

use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one criterion: a one-line summary of what was measured.
pub type Verdict = Result<String, String>;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("FLOWLAB_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut shared = training::Shared::default();
    let criteria: Vec<(usize, &str, Box<dyn FnOnce(&mut training::Shared) -> Verdict>)> = vec![
        (1, "gradient correctness", Box::new(|_| gradients::run())),
        (2, "log-probability oracle", Box::new(|_| densities::run())),
        (3, "PPO ratio equivalence", Box::new(|_| ratios::run())),
        (4, "RL improves over imitation", Box::new(training::improvement)),
        (5, "diversity trend", Box::new(training::diversity)),
        (6, "K ablation", Box::new(training::k_ablation)),
        (7, "QA soundness and completeness", Box::new(|_| qa::run())),
        (8, "determinism", Box::new(|_| determinism::run())),
        (9, "success-predicate oracle", Box::new(|_| predicate::run())),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (n, name, check) in criteria {
        if !wanted(n) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

/// `Err` with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

pub fn lift<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}
