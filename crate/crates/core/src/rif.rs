//! Rollout-based instance filtering: before training on a task, draw `N`
//! rollouts per example and keep only examples where some rollout earns a
//! reward above `τ`. Examples the current policy never gets any reward on
//! contribute nothing to a group-relative gradient except noise, so they
//! are dropped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::Policy;
use crate::seed;
use crate::task::{overall_reward, TaskDataset, TaskExample};
use crate::trainer::{train_task, TaskRun, TrainConfig};

fn default_n() -> usize {
    8
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "default_n")]
    pub n_rollouts: usize,
    /// An example is kept iff its best rollout reward is strictly above `tau`.
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_rollouts: default_n(),
            tau: 0.0,
            temperature: default_temperature(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_rollouts == 0 {
            errs.push("n_rollouts: must be at least 1".into());
        }
        // -inf is allowed and keeps everything.
        if self.tau.is_nan() || self.tau >= 1.0 {
            errs.push(format!("tau: {} must be below 1", self.tau));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push("temperature: must be positive".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: TaskDataset,
    /// `(example id, R_max)` of kept examples, in input order.
    pub kept_r_max: Vec<(usize, f64)>,
    /// `(example id, R_max)` of dropped examples, in input order.
    pub dropped: Vec<(usize, f64)>,
    pub kept_fraction: f64,
}

impl FilterOutcome {
    pub fn summary(&self) -> FilterSummary {
        let n_input = self.kept_r_max.len() + self.dropped.len();
        let mut r_max_counts = BTreeMap::new();
        for (_, r) in self.kept_r_max.iter().chain(&self.dropped) {
            *r_max_counts.entry(format!("{r:.4}")).or_insert(0) += 1;
        }
        FilterSummary {
            task: self.kept.task_id(),
            n_input,
            n_kept: self.kept_r_max.len(),
            kept_fraction: self.kept_fraction,
            r_max_counts,
            dropped_ids: self.dropped.iter().map(|(id, _)| *id).collect(),
            skipped: self.kept_r_max.is_empty(),
        }
    }
}

/// Serialized form of one task's filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub task: usize,
    pub n_input: usize,
    pub n_kept: usize,
    pub kept_fraction: f64,
    /// Histogram of per-example best reward.
    pub r_max_counts: BTreeMap<String, usize>,
    pub dropped_ids: Vec<usize>,
    /// No example survived, so the task was not trained on.
    pub skipped: bool,
}

const FILTER_STREAM: u64 = 0x0F11;

/// Best reward over `n` rollouts for one example. Rollout `j` draws from a
/// stream keyed by `(seed, example id, j)`, so the rollouts for `n` are a
/// prefix of those for any larger `n`.
pub fn best_rollout_reward<P: Policy>(
    policy: &P,
    theta: &[f64],
    dataset: &TaskDataset,
    example: &TaskExample,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for j in 0..cfg.n_rollouts {
        let mut rng = seed::rng_at(seed, &[FILTER_STREAM, example.id as u64, j as u64]);
        let a = policy.sample(theta, &example.prompt, cfg.temperature, &mut rng)?;
        best = best.max(overall_reward(policy.vocab(), &a, &example.target, &dataset.reward));
    }
    Ok(best)
}

pub fn filter_instances<P: Policy>(
    policy: &P,
    theta: &[f64],
    dataset: &TaskDataset,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<FilterOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(invalid(errs.join("; ")));
    }
    if dataset.train.is_empty() {
        return Err(invalid("cannot filter an empty dataset"));
    }
    let best = dataset
        .train
        .par_iter()
        .map(|ex| best_rollout_reward(policy, theta, dataset, ex, cfg, seed))
        .collect::<Result<Vec<f64>>>()?;
    let mut kept = Vec::new();
    let mut kept_r_max = Vec::new();
    let mut dropped = Vec::new();
    for (ex, r) in dataset.train.iter().zip(best) {
        if r > cfg.tau {
            kept.push(ex.clone());
            kept_r_max.push((ex.id, r));
        } else {
            dropped.push((ex.id, r));
        }
    }
    let kept_fraction = kept.len() as f64 / dataset.train.len() as f64;
    Ok(FilterOutcome {
        kept: dataset.with_train(kept),
        kept_r_max,
        dropped,
        kept_fraction,
    })
}

/// Filters the task against the parameters entering it, then trains on the
/// kept examples. With nothing kept the parameters pass through unchanged.
pub fn rif_rft_task<P: Policy>(
    policy: &P,
    theta_in: &[f64],
    dataset: &TaskDataset,
    filter: &FilterConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(TaskRun, FilterSummary)> {
    let outcome = filter_instances(policy, theta_in, dataset, filter, seed)?;
    let summary = outcome.summary();
    if outcome.kept.train.is_empty() {
        let run = TaskRun {
            theta: crate::ParamVector::from_vec(theta_in.to_vec()),
            logs: Vec::new(),
            snapshots: Vec::new(),
        };
        return Ok((run, summary));
    }
    let run = train_task(policy, theta_in, &outcome.kept, train, seed, Some(theta_in))?;
    Ok((run, summary))
}

#[derive(Serialize, Deserialize)]
struct FilterReport {
    kept_fraction: f64,
    instances_trained: usize,
    instances_total: usize,
    tasks: Vec<FilterSummary>,
}

/// Writes `filter_report.json`; the top-level `kept_fraction` pools all tasks.
pub fn write_filter_report(tasks: &[FilterSummary], path: &Path) -> Result<()> {
    let total: usize = tasks.iter().map(|t| t.n_input).sum();
    let kept: usize = tasks.iter().map(|t| t.n_kept).sum();
    let report = FilterReport {
        kept_fraction: if total == 0 { 1.0 } else { kept as f64 / total as f64 },
        instances_trained: kept,
        instances_total: total,
        tasks: tasks.to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

pub fn read_filter_report(path: &Path) -> Result<Vec<FilterSummary>> {
    let report: FilterReport = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(report.tasks)
}
