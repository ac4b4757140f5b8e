//! Continual post-training loop, evaluation, and forgetting metrics.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    grpo_gradient, reinforce_gradient, remax_gradient, rloo_gradient, sft_gradient, EstimatorKind, GradEstimate,
    KlConfig, KlMode, KlPenalty, RolloutGroup,
};
use crate::param::ParamVector;
use crate::policy::{Checkpoint, Policy, PolicyModel, Prompt, Response, DEFAULT_ENUMERATION_LIMIT};
use crate::rif::{self, FilterConfig, FilterSummary};
use crate::seed;
use crate::task::{extract_answer, overall_reward, RewardSpec, TaskDataset, TaskExample, TaskStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    64
}
fn default_steps() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Prompts per step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps_per_task: usize,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, batch_size: usize, steps_per_task: usize) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size,
            steps_per_task,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate: {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            errs.push("batch_size: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("beta1/beta2: must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            errs.push("eps: must be positive".into());
        }
        errs
    }
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::Grpo
}
fn default_group_size() -> usize {
    8
}
fn default_kl_beta() -> f64 {
    0.01
}
fn default_kl_mode() -> KlMode {
    KlMode::Exact
}
fn default_sigma_floor() -> f64 {
    1e-8
}
fn default_temperature() -> f64 {
    1.0
}
fn default_limit() -> u64 {
    DEFAULT_ENUMERATION_LIMIT
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// KL coefficient β; only GRPO applies the penalty.
    #[serde(default = "default_kl_beta")]
    pub beta: f64,
    #[serde(default = "default_kl_mode")]
    pub kl_mode: KlMode,
    #[serde(default = "default_true")]
    pub kl_enabled: bool,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_limit")]
    pub enumeration_limit: u64,
    /// Constant REINFORCE baseline; the batch mean reward when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reinforce_baseline: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl EstimatorConfig {
    pub fn of(kind: EstimatorKind) -> Self {
        Self {
            estimator: kind,
            ..Default::default()
        }
    }

    pub fn kl_config(&self) -> Option<KlConfig> {
        (self.estimator == EstimatorKind::Grpo && self.kl_enabled).then(|| KlConfig {
            beta: self.beta,
            mode: self.kl_mode,
            enumeration_limit: self.enumeration_limit,
        })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let needs_group = matches!(self.estimator, EstimatorKind::Grpo | EstimatorKind::Rloo);
        if self.estimator.is_rft() && self.group_size == 0 || needs_group && self.group_size < 2 {
            errs.push(format!("group_size: {} too small for {}", self.group_size, self.estimator.name()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            errs.push("beta: must be finite and >= 0".into());
        }
        if !(self.sigma_floor >= 0.0) {
            errs.push("sigma_floor: must be >= 0".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push("temperature: must be positive".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub estimator: EstimatorConfig,
    pub optimizer: OptimizerConfig,
    /// Save θ every this many steps within a task (0: only task boundaries).
    #[serde(default)]
    pub snapshot_every: usize,
}

/// One optimizer step's diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub step: usize,
    pub estimator: EstimatorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_reward_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_value: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub task: usize,
    /// Number of updates applied within the task when θ was captured.
    pub step: usize,
    pub theta: ParamVector,
}

/// A training example bound to the reward it is scored with.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub example: &'a TaskExample,
    pub reward: &'a RewardSpec,
}

pub fn items(dataset: &TaskDataset) -> Vec<TrainItem<'_>> {
    dataset
        .train
        .iter()
        .map(|example| TrainItem {
            example,
            reward: &dataset.reward,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRun {
    pub theta: ParamVector,
    pub logs: Vec<StepLog>,
    pub snapshots: Vec<Snapshot>,
}

enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig, dim: usize) -> Self {
        match cfg.kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }

    /// Moves θ along `direction`, which already points uphill on the objective.
    fn apply(&mut self, cfg: &OptimizerConfig, theta: &mut [f64], direction: &[f64]) {
        let lr = cfg.learning_rate;
        match self {
            Optimizer::Sgd => {
                for (w, d) in theta.iter_mut().zip(direction) {
                    *w += lr * d;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - cfg.beta1.powi(*t);
                let c2 = 1.0 - cfg.beta2.powi(*t);
                for i in 0..theta.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * direction[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * direction[i] * direction[i];
                    theta[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
}

const STEP_STREAM: u64 = 0;
const ROLLOUT_STREAM: u64 = 1;

/// One gradient estimate on a sampled batch.
pub fn estimate_step<P: Policy>(
    policy: &P,
    theta: &[f64],
    batch: &[TrainItem<'_>],
    cfg: &EstimatorConfig,
    kl_reference: Option<&[f64]>,
    rollout_seed: u64,
) -> Result<GradEstimate> {
    if cfg.estimator == EstimatorKind::Sft {
        let pairs: Vec<(&Prompt, &Response)> = batch.iter().map(|it| (&it.example.prompt, &it.example.target)).collect();
        return sft_gradient(policy, theta, &pairs);
    }
    let vocab = policy.vocab();
    let groups = batch
        .par_iter()
        .enumerate()
        .map(|(k, it)| {
            let mut rng = seed::rng_at(rollout_seed, &[k as u64]);
            RolloutGroup::sample(
                policy,
                theta,
                &it.example.prompt,
                cfg.group_size,
                cfg.temperature,
                &mut rng,
                |a| overall_reward(vocab, a, &it.example.target, it.reward),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    match cfg.estimator {
        EstimatorKind::Grpo => {
            let kl_cfg = cfg.kl_config();
            let penalty = match (&kl_cfg, kl_reference) {
                (Some(c), Some(theta_ref)) => Some(KlPenalty { config: c, theta_ref }),
                _ => None,
            };
            grpo_gradient(policy, theta, &groups, cfg.sigma_floor, penalty)
        }
        EstimatorKind::Rloo => rloo_gradient(policy, theta, &groups),
        EstimatorKind::Remax => {
            let greedy = batch
                .par_iter()
                .map(|it| {
                    let g = policy.greedy_decode(theta, &it.example.prompt)?;
                    Ok(overall_reward(vocab, &g, &it.example.target, it.reward))
                })
                .collect::<Result<Vec<_>>>()?;
            remax_gradient(policy, theta, &groups, &greedy)
        }
        EstimatorKind::Reinforce => {
            let baseline = cfg.reinforce_baseline.unwrap_or_else(|| {
                let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
                crate::estimators::mean(&all)
            });
            reinforce_gradient(policy, theta, &groups, baseline)
        }
        EstimatorKind::Sft => unreachable!(),
    }
}

/// Trains on one task's items for `steps_per_task` steps. Batches and
/// rollouts draw from streams derived from `seed`, so results do not depend
/// on the number of worker threads.
pub fn train_items<P: Policy>(
    policy: &P,
    theta_in: &[f64],
    task: usize,
    train: &[TrainItem<'_>],
    cfg: &TrainConfig,
    seed: u64,
    kl_reference: Option<&[f64]>,
) -> Result<TaskRun> {
    policy.check_theta(theta_in)?;
    if train.is_empty() {
        return Err(invalid(format!("task {task} has no training examples")));
    }
    let errs: Vec<String> = cfg.optimizer.validate().into_iter().chain(cfg.estimator.validate()).collect();
    if !errs.is_empty() {
        return Err(Error::Schema(errs));
    }
    let mut theta = ParamVector::from_vec(theta_in.to_vec());
    let mut opt = Optimizer::new(&cfg.optimizer, theta.len());
    let mut logs = Vec::with_capacity(cfg.optimizer.steps_per_task);
    let mut snapshots = Vec::new();
    let mut direction = vec![0.0; theta.len()];
    for step in 0..cfg.optimizer.steps_per_task {
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            snapshots.push(Snapshot {
                task,
                step,
                theta: theta.clone(),
            });
        }
        let mut rng = seed::rng_at(seed, &[STEP_STREAM, step as u64]);
        let batch: Vec<TrainItem<'_>> = (0..cfg.optimizer.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let rollout_seed = seed::derive(seed, &[ROLLOUT_STREAM, step as u64]);
        let est = estimate_step(policy, &theta, &batch, &cfg.estimator, kl_reference, rollout_seed).map_err(
            |e| match e {
                Error::InvalidInput(detail) if detail.contains("not finite") => Error::NonFinite { task, step, detail },
                other => other,
            },
        )?;
        let sign = est.improvement_sign();
        for (d, g) in direction.iter_mut().zip(est.grad.iter()) {
            *d = sign * g;
        }
        opt.apply(&cfg.optimizer, &mut theta, &direction);
        if !theta.is_finite() {
            return Err(Error::NonFinite {
                task,
                step,
                detail: "parameters diverged after update".into(),
            });
        }
        logs.push(StepLog {
            task,
            step,
            estimator: est.estimator,
            batch_mean_reward: est.batch_mean_reward,
            batch_reward_variance: est.batch_reward_variance,
            kl_value: est.kl_value,
            grad_norm: est.grad.norm(),
        });
    }
    if cfg.snapshot_every > 0 {
        snapshots.push(Snapshot {
            task,
            step: cfg.optimizer.steps_per_task,
            theta: theta.clone(),
        });
    }
    Ok(TaskRun { theta, logs, snapshots })
}

/// Trains on `dataset`'s training split. The KL reference (GRPO only) is
/// `kl_reference`, normally the parameters entering the task.
pub fn train_task<P: Policy>(
    policy: &P,
    theta_in: &[f64],
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    seed: u64,
    kl_reference: Option<&[f64]>,
) -> Result<TaskRun> {
    train_items(policy, theta_in, dataset.task_id(), &items(dataset), cfg, seed, kl_reference)
}

/// Fraction of examples whose greedy answer-slot token is correct.
pub fn evaluate<P: Policy>(policy: &P, theta: &[f64], examples: &[TaskExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(invalid("cannot evaluate on an empty test set"));
    }
    let hits = examples
        .par_iter()
        .map(|ex| {
            let a = policy.greedy_decode(theta, &ex.prompt)?;
            Ok(usize::from(extract_answer(policy.vocab(), &a) == Some(ex.answer)))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// `rows[t][j]`: test accuracy on task `j` after training on task `t`.
/// A continual run has `T` rows of lengths `1..=T`; a joint (multi-task)
/// run has a single full row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfMatrix {
    pub n_tasks: usize,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_acc: f64,
    pub fm: f64,
}

impl PerfMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            rows: Vec::new(),
        }
    }

    pub fn joint(row: Vec<f64>) -> Self {
        Self {
            n_tasks: row.len(),
            rows: vec![row],
        }
    }

    pub fn is_joint(&self) -> bool {
        self.n_tasks > 1 && self.rows.len() == 1 && self.rows[0].len() == self.n_tasks
    }

    pub fn is_complete(&self) -> bool {
        self.is_joint()
            || (self.rows.len() == self.n_tasks && self.rows.iter().enumerate().all(|(t, r)| r.len() == t + 1))
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["after_task".to_string()];
        header.extend((0..self.n_tasks).map(|j| format!("task_{j}")));
        w.write_record(&header)?;
        for (t, row) in self.rows.iter().enumerate() {
            let label = if self.is_joint() { "all".to_string() } else { t.to_string() };
            let mut rec = vec![label];
            rec.extend((0..self.n_tasks).map(|j| row.get(j).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let n_tasks = r.headers()?.len().saturating_sub(1);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut row = Vec::new();
            for cell in rec.iter().skip(1) {
                if cell.is_empty() {
                    break;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Integrity(format!("{}: bad accuracy cell {cell:?}", path.display())))?;
                row.push(v);
            }
            rows.push(row);
        }
        let m = Self { n_tasks, rows };
        if !m.is_complete() {
            return Err(Error::Integrity(format!("{}: incomplete performance matrix", path.display())));
        }
        Ok(m)
    }
}

/// Average accuracy of the final row and forgetting measure
/// `FM = (1/T) Σ_i (P[T][i] − max_{k≥i} P[k][i])`, which is 0 for `T = 1`
/// and for a joint run.
pub fn compute_metrics(p: &PerfMatrix) -> Result<Metrics> {
    if p.n_tasks == 0 || !p.is_complete() {
        return Err(invalid("performance matrix is incomplete"));
    }
    if let Some(v) = p.rows.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("accuracy {v} outside [0, 1]")));
    }
    let last = p.final_row().unwrap();
    let t = p.n_tasks as f64;
    let avg_acc = last.iter().sum::<f64>() / t;
    if p.is_joint() {
        return Ok(Metrics { avg_acc, fm: 0.0 });
    }
    let mut fm = 0.0;
    for i in 0..p.n_tasks {
        let best = p.rows[i..].iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
        fm += last[i] - best;
    }
    Ok(Metrics { avg_acc, fm: fm / t })
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    /// Snapshot of the configuration slice that produced this run.
    pub config: serde_json::Value,
    pub policy: PolicyModel,
    pub base_theta: ParamVector,
    /// `checkpoints[t]` holds θ after task `t`.
    pub checkpoints: Vec<ParamVector>,
    pub perf: PerfMatrix,
    pub steps: Vec<StepLog>,
    pub snapshots: Vec<Snapshot>,
    pub filters: Vec<FilterSummary>,
    /// Set when training aborted; the other fields hold the partial run.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunStatus {
    complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
    method: String,
    seed: u64,
}

impl RunRecord {
    pub fn metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.perf)
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.perf.is_complete()
    }

    /// Writes the run directory: `config.json`, `perf_matrix.csv`,
    /// `steps.jsonl`, `checkpoints/`, `metrics.json`, `status.json`, and
    /// `filter_report.json` when filtering ran.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        self.perf.write_csv(&dir.join("perf_matrix.csv"))?;
        let mut w = BufWriter::new(fs::File::create(dir.join("steps.jsonl"))?);
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Checkpoint::new(self.policy.clone(), self.base_theta.clone(), self.seed)?
            .save(&dir.join("checkpoints/theta_base.json"))?;
        for (t, theta) in self.checkpoints.iter().enumerate() {
            Checkpoint::new(self.policy.clone(), theta.clone(), self.seed)?
                .save(&dir.join(format!("checkpoints/theta_task_{t}.json")))?;
        }
        if !self.snapshots.is_empty() {
            fs::write(dir.join("snapshots.json"), serde_json::to_string(&self.snapshots)?)?;
        }
        if !self.filters.is_empty() {
            rif::write_filter_report(&self.filters, &dir.join("filter_report.json"))?;
        }
        if self.perf.is_complete() {
            fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&self.metrics()?)?)?;
        }
        let status = RunStatus {
            complete: self.is_complete(),
            failure: self.failure.clone(),
            method: self.method.clone(),
            seed: self.seed,
        };
        fs::write(dir.join("status.json"), serde_json::to_string_pretty(&status)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let status: RunStatus = serde_json::from_str(&fs::read_to_string(dir.join("status.json"))?)?;
        let config = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let base = Checkpoint::load(&dir.join("checkpoints/theta_base.json"))?;
        let mut checkpoints = Vec::new();
        loop {
            let path = dir.join(format!("checkpoints/theta_task_{}.json", checkpoints.len()));
            if !path.exists() {
                break;
            }
            let ck = Checkpoint::load(&path)?;
            if ck.policy != base.policy {
                return Err(Error::Integrity(format!("{}: policy differs from base", path.display())));
            }
            checkpoints.push(ck.theta);
        }
        let perf = if status.complete {
            PerfMatrix::read_csv(&dir.join("perf_matrix.csv"))?
        } else {
            read_partial_matrix(&dir.join("perf_matrix.csv"))?
        };
        let mut steps = Vec::new();
        for line in BufReader::new(fs::File::open(dir.join("steps.jsonl"))?).lines() {
            let line = line?;
            if !line.is_empty() {
                steps.push(serde_json::from_str(&line)?);
            }
        }
        let snapshots = match fs::read_to_string(dir.join("snapshots.json")) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => Vec::new(),
        };
        let filter_path = dir.join("filter_report.json");
        let filters = if filter_path.exists() {
            rif::read_filter_report(&filter_path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            method: status.method,
            seed: status.seed,
            config,
            policy: base.policy,
            base_theta: base.theta,
            checkpoints,
            perf,
            steps,
            snapshots,
            filters,
            failure: status.failure,
        })
    }
}

fn read_partial_matrix(path: &Path) -> Result<PerfMatrix> {
    let mut r = csv::Reader::from_path(path)?;
    let n_tasks = r.headers()?.len().saturating_sub(1);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().skip(1).take_while(|c| !c.is_empty()).filter_map(|c| c.parse().ok()).collect());
    }
    Ok(PerfMatrix { n_tasks, rows })
}

/// Settings of a sequential run beyond the per-task training config.
#[derive(Clone, Debug, Default)]
pub struct ContinualOptions<'a> {
    /// Screen each task's training split before training on it.
    pub filter: Option<&'a FilterConfig>,
}

/// Seed of the training stream for task `t` of a run.
pub fn task_seed(run_seed: u64, t: usize) -> u64 {
    seed::derive(run_seed, &[0x7a5c, t as u64])
}

/// Trains on each task in order, evaluating all tasks seen so far after
/// each one. A failure mid-run is reported in `failure` with the rows and
/// checkpoints completed before it.
#[allow(clippy::too_many_arguments)]
pub fn run_continual(
    method: &str,
    policy: &PolicyModel,
    theta0: &[f64],
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
    run_seed: u64,
    options: &ContinualOptions<'_>,
    config_snapshot: serde_json::Value,
) -> Result<RunRecord> {
    if tasks.is_empty() {
        return Err(invalid("task stream is empty"));
    }
    policy.check_theta(theta0)?;
    let mut record = RunRecord {
        method: method.to_string(),
        seed: run_seed,
        config: config_snapshot,
        policy: policy.clone(),
        base_theta: ParamVector::from_vec(theta0.to_vec()),
        checkpoints: Vec::new(),
        perf: PerfMatrix::new(tasks.len()),
        steps: Vec::new(),
        snapshots: Vec::new(),
        filters: Vec::new(),
        failure: None,
    };
    let mut theta = record.base_theta.clone();
    for (t, task) in tasks.iter().enumerate() {
        let seed_t = task_seed(run_seed, t);
        let outcome = match options.filter {
            Some(fcfg) => rif::rif_rft_task(policy, &theta, task, fcfg, cfg, seed_t).map(|(run, summary)| {
                record.filters.push(summary);
                run
            }),
            None => train_task(policy, &theta, task, cfg, seed_t, Some(&theta)),
        };
        match outcome {
            Ok(run) => {
                theta = run.theta;
                record.steps.extend(run.logs);
                record.snapshots.extend(run.snapshots);
            }
            Err(e) => {
                record.failure = Some(e.to_string());
                return Ok(record);
            }
        }
        let row = tasks[..=t]
            .iter()
            .map(|d| evaluate(policy, &theta, &d.test))
            .collect::<Result<Vec<_>>>()?;
        record.perf.rows.push(row);
        record.checkpoints.push(theta.clone());
    }
    Ok(record)
}

/// Joint training on the union of all tasks for `T · steps_per_task` steps,
/// evaluated once at the end.
pub fn run_mtl(
    method: &str,
    policy: &PolicyModel,
    theta0: &[f64],
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
    run_seed: u64,
    config_snapshot: serde_json::Value,
) -> Result<RunRecord> {
    if tasks.is_empty() {
        return Err(invalid("task stream is empty"));
    }
    let pooled: Vec<TrainItem<'_>> = tasks.iter().flat_map(items).collect();
    let mut joint_cfg = cfg.clone();
    joint_cfg.optimizer.steps_per_task = cfg.optimizer.steps_per_task * tasks.len();
    let mut record = RunRecord {
        method: method.to_string(),
        seed: run_seed,
        config: config_snapshot,
        policy: policy.clone(),
        base_theta: ParamVector::from_vec(theta0.to_vec()),
        checkpoints: Vec::new(),
        perf: PerfMatrix::new(tasks.len()),
        steps: Vec::new(),
        snapshots: Vec::new(),
        filters: Vec::new(),
        failure: None,
    };
    match train_items(policy, theta0, 0, &pooled, &joint_cfg, task_seed(run_seed, 0), Some(theta0)) {
        Ok(run) => {
            let row = tasks
                .iter()
                .map(|d| evaluate(policy, &run.theta, &d.test))
                .collect::<Result<Vec<_>>>()?;
            record.perf = PerfMatrix::joint(row);
            record.checkpoints.push(run.theta);
            record.steps = run.logs;
            record.snapshots = run.snapshots;
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    Ok(record)
}

fn default_pretrain_steps() -> usize {
    300
}
fn default_pretrain_lr() -> f64 {
    0.05
}
fn default_pretrain_batch() -> usize {
    32
}
fn default_init_scale() -> f64 {
    0.5
}

/// Supervised warm-up giving the base policy the response format and a
/// near-uniform preference over ordinary answers, so every task starts with
/// non-zero reward. Each step draws fresh contexts from all buckets and
/// pairs them with uniformly random ordinary answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    /// Scale of the random initial weights (MLP only).
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Random initialization followed by the supervised warm-up, all seeded.
pub fn pretrain_base(policy: &PolicyModel, stream: &TaskStream, cfg: &PretrainConfig, seed: u64) -> Result<ParamVector> {
    let mut theta = match policy {
        PolicyModel::Mlp(m) => m.init_theta(seed::derive(seed, &[0]), cfg.init_scale),
        PolicyModel::Tabular(_) => ParamVector::zeros(policy.num_params()),
    };
    let template = stream.config.template(stream.ordinary_answers());
    let answers = stream.ordinary_answers();
    let opt_cfg = OptimizerConfig {
        kind: OptimizerKind::Adam,
        ..OptimizerConfig::sgd(cfg.learning_rate, cfg.batch_size, cfg.steps)
    };
    let mut opt = Optimizer::new(&opt_cfg, theta.len());
    let mut direction = vec![0.0; theta.len()];
    for step in 0..cfg.steps {
        let mut rng = seed::rng_at(seed, &[1, step as u64]);
        let batch: Vec<(Prompt, Response)> = (0..cfg.batch_size)
            .map(|_| {
                let bucket = rng.random_range(0..stream.n_buckets);
                let context = stream.make_context(bucket, &mut rng);
                let answer = answers[rng.random_range(0..answers.len())];
                let target = template.render(&stream.vocab, &[], answer)?;
                Ok((Prompt::new(usize::MAX, context), target))
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&Prompt, &Response)> = batch.iter().map(|(x, a)| (x, a)).collect();
        let est = sft_gradient(policy, &theta, &pairs)?;
        for (d, g) in direction.iter_mut().zip(est.grad.iter()) {
            *d = -g;
        }
        opt.apply(&opt_cfg, &mut theta, &direction);
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> PerfMatrix {
        PerfMatrix { n_tasks: rows.len(), rows }
    }

    #[test]
    fn metrics_hand_example() {
        let m = compute_metrics(&matrix(vec![vec![0.9], vec![0.6, 0.8]])).unwrap();
        assert!((m.avg_acc - 0.7).abs() < 1e-15);
        assert!((m.fm + 0.15).abs() < 1e-15);
    }

    #[test]
    fn single_task_has_zero_forgetting() {
        let m = compute_metrics(&matrix(vec![vec![0.42]])).unwrap();
        assert_eq!(m, Metrics { avg_acc: 0.42, fm: 0.0 });
    }

    #[test]
    fn monotone_columns_have_zero_forgetting() {
        let m = compute_metrics(&matrix(vec![vec![0.5], vec![0.6, 0.4], vec![0.7, 0.4, 0.9]])).unwrap();
        assert_eq!(m.fm, 0.0);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let p = PerfMatrix {
            n_tasks: 3,
            rows: vec![vec![0.5], vec![0.5, 0.5]],
        };
        assert!(compute_metrics(&p).is_err());
    }

    #[test]
    fn perf_matrix_csv_round_trips_bits() {
        let p = matrix(vec![vec![0.1 + 0.2], vec![1.0 / 3.0, 0.0]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        p.write_csv(&path).unwrap();
        assert_eq!(PerfMatrix::read_csv(&path).unwrap(), p);
        let joint = PerfMatrix::joint(vec![0.5, 0.25]);
        joint.write_csv(&path).unwrap();
        assert_eq!(PerfMatrix::read_csv(&path).unwrap(), joint);
        assert_eq!(compute_metrics(&joint).unwrap().fm, 0.0);
    }
}
