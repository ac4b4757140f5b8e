//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rftlab_core::{ExperimentConfig, Policy, Prompt, Response};

pub fn normal(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// `F = (1/m) Σ s sᵀ` over the scores of `past`, as an explicit matrix.
pub fn dense_fisher<P: Policy>(past: &[(Prompt, Response)], policy: &P, theta: &[f64]) -> Vec<Vec<f64>> {
    let d = policy.num_params();
    let mut f = vec![vec![0.0; d]; d];
    let w = 1.0 / past.len() as f64;
    for (x, a) in past {
        let s = policy.score(theta, x, a).unwrap();
        for i in 0..d {
            for j in 0..d {
                f[i][j] += w * s[i] * s[j];
            }
        }
    }
    f
}

pub fn quad_form(m: &[Vec<f64>], g: &[f64]) -> f64 {
    m.iter()
        .zip(g)
        .map(|(row, gi)| gi * row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Two methods, three seeds, a two-task stream: seconds to run.
pub fn tiny_suite() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "name": "tiny",
            "stream": {"n_tasks": 2, "train_size": 24, "test_size": 16, "think_len_max": 0},
            "policy": {"kind": "mlp", "hidden": 8},
            "pretrain": {"steps": 20},
            "methods": [
                {"name": "sft", "estimator": {"estimator": "sft"},
                 "optimizer": {"learning_rate": 0.1, "batch_size": 8, "steps_per_task": 6}},
                {"name": "grpo", "estimator": {"estimator": "grpo", "kl_mode": "monte_carlo", "group_size": 4},
                 "optimizer": {"learning_rate": 0.01, "batch_size": 8, "steps_per_task": 6}}
            ],
            "seeds": [0, 1, 2]
        }"#,
    )
    .unwrap()
}

fn steps_have_kl(dir: &Path) -> (usize, usize) {
    let text = std::fs::read_to_string(dir.join("steps.jsonl")).unwrap();
    let mut with = 0;
    let mut total = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        total += 1;
        if v.get("kl_value").is_some() {
            with += 1;
        }
    }
    (with, total)
}

/// GRPO with `kl_off` logs no `kl_value` at any step, while the same run
/// with the penalty logs one at every step.
pub fn kl_off_logs_have_no_kl_value() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_suite();
    cfg.methods.retain(|m| m.name == "grpo");
    cfg.seeds = vec![0];
    let on = dir.path().join("on");
    rftlab_core::experiment::run_suite(&cfg, &on, 1).unwrap();
    cfg.ablation.kl_off = true;
    let off = dir.path().join("off");
    rftlab_core::experiment::run_suite(&cfg, &off, 1).unwrap();
    let (on_with, on_total) = steps_have_kl(&rftlab_core::experiment::run_dir(&on, "grpo", 0));
    let (off_with, off_total) = steps_have_kl(&rftlab_core::experiment::run_dir(&off, "grpo", 0));
    on_total > 0 && on_with == on_total && off_total == on_total && off_with == 0
}
