//! Forgetting risk of an update `g` measured in the empirical Fisher metric
//! of past-task data, `R(g) = gᵀ F g` with `F = (1/m) Σ_j s_j s_jᵀ`, and the
//! decomposition of the expected risk of a policy-gradient update into a
//! reward-variance-scaled supervised risk plus an error term.
//!
//! `F` is never materialized: the bank stores the score vectors `s_j` and
//! `R(g) = (1/m) Σ_j (s_j · g)²`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::param::{dot, ParamVector};
use crate::policy::{Policy, PolicyModel, Prompt, Response, DEFAULT_ENUMERATION_LIMIT};
use crate::seed;
use crate::task::{overall_reward, TaskDataset};
use crate::trainer::RunRecord;

/// Score vectors of past-task examples, all taken at the same θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBank {
    scores: Vec<ParamVector>,
    /// `(task, example id)` of each vector.
    sources: Vec<(usize, usize)>,
    dim: usize,
}

impl ScoreBank {
    pub fn build<P: Policy>(policy: &P, theta: &[f64], past: &[(usize, usize, &Prompt, &Response)]) -> Result<Self> {
        if past.is_empty() {
            return Err(invalid("score bank needs at least one past example"));
        }
        let scores = past
            .par_iter()
            .map(|(_, _, x, a)| policy.score(theta, x, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scores,
            sources: past.iter().map(|(t, i, _, _)| (*t, *i)).collect(),
            dim: policy.num_params(),
        })
    }

    /// Bank over the training examples of `tasks`, at most `per_task` from each.
    pub fn from_tasks<P: Policy>(
        policy: &P,
        theta: &[f64],
        tasks: &[TaskDataset],
        per_task: Option<usize>,
    ) -> Result<Self> {
        let past: Vec<(usize, usize, &Prompt, &Response)> = tasks
            .iter()
            .flat_map(|d| {
                let n = per_task.unwrap_or(d.train.len()).min(d.train.len());
                d.train[..n].iter().map(move |ex| (d.task_id(), ex.id, &ex.prompt, &ex.target))
            })
            .collect();
        Self::build(policy, theta, &past)
    }

    pub fn from_vectors(scores: Vec<ParamVector>) -> Result<Self> {
        let dim = scores.first().map(|s| s.len()).ok_or_else(|| invalid("empty score bank"))?;
        if scores.iter().any(|s| s.len() != dim) {
            return Err(invalid("score vectors differ in dimension"));
        }
        let sources = (0..scores.len()).map(|j| (0, j)).collect();
        Ok(Self { scores, sources, dim })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scores(&self) -> &[ParamVector] {
        &self.scores
    }

    pub fn sources(&self) -> &[(usize, usize)] {
        &self.sources
    }

    /// `R(g) = (1/m) Σ_j (s_j · g)²`.
    pub fn forgetting_risk(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.dim {
            return Err(invalid(format!("update has dimension {}, bank has {}", g.len(), self.dim)));
        }
        let total: f64 = self
            .scores
            .iter()
            .map(|s| {
                let d = dot(s, g);
                d * d
            })
            .sum();
        Ok(total / self.scores.len() as f64)
    }

    /// Importance-weighted score norm `I(a) = R(∇log π(a|x))`.
    pub fn iwsn<P: Policy>(&self, policy: &P, theta: &[f64], x: &Prompt, a: &Response) -> Result<f64> {
        self.forgetting_risk(&policy.score(theta, x, a)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub mean_reward: f64,
    /// `E[(r − E r)²]`, summed term by term.
    pub e_a2: f64,
    /// `E[r²] − (E r)²`, from raw moments.
    pub var_r: f64,
}

pub const LEMMA1_TOLERANCE: f64 = 1e-10;
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

/// Expected squared advantage under the mean-reward baseline against the
/// reward variance, both by enumeration. Errors if they differ by more
/// than [`LEMMA1_TOLERANCE`] or if a `[0, 1]` reward breaks the 1/4 bound.
pub fn verify_lemma1<P: Policy>(
    policy: &P,
    theta: &[f64],
    x: &Prompt,
    reward: &(dyn Fn(&Response) -> f64 + Sync),
    limit: u64,
) -> Result<Lemma1Check> {
    let dist = policy.response_distribution(theta, x, limit)?;
    let rewards: Vec<f64> = dist.iter().map(|(a, _)| reward(a)).collect();
    let b: f64 = dist.iter().zip(&rewards).map(|((_, p), r)| p * r).sum();
    let e_a2: f64 = dist.iter().zip(&rewards).map(|((_, p), r)| p * (r - b) * (r - b)).sum();
    let e_r2: f64 = dist.iter().zip(&rewards).map(|((_, p), r)| p * r * r).sum();
    let var_r = e_r2 - b * b;
    if (e_a2 - var_r).abs() > LEMMA1_TOLERANCE {
        return Err(Error::Integrity(format!("E[A^2] = {e_a2} but Var[r] = {var_r}")));
    }
    if rewards.iter().all(|r| (0.0..=1.0).contains(r)) && e_a2 > 0.25 + LEMMA1_TOLERANCE {
        return Err(Error::Integrity(format!("reward variance {e_a2} exceeds 1/4")));
    }
    Ok(Lemma1Check {
        mean_reward: b,
        e_a2,
        var_r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    Exact,
    MonteCarlo,
    /// Exact when the response space is enumerable, Monte Carlo otherwise.
    Auto,
}

fn default_mc_samples() -> usize {
    4096
}
fn default_limit() -> u64 {
    DEFAULT_ENUMERATION_LIMIT
}
fn default_mode() -> RiskMode {
    RiskMode::Auto
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    #[serde(default = "default_mode")]
    pub mode: RiskMode,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_limit")]
    pub enumeration_limit: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Expected forgetting risk of a policy-gradient update at one prompt,
/// decomposed as `E[R(g_RFT)] = Var[r]·R(g_SFT) + (Var[r]·δ + ε₁)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    /// `I(a*)`, the risk of the supervised update on the ground truth.
    pub r_sft: f64,
    /// `E[A² I(a)]` with `A = r − E r`.
    pub e_r_rft: f64,
    pub var_r: f64,
    /// `Cov(A², I)`, computed from centered terms.
    pub eps1: f64,
    /// `E[I] − I(a*)`.
    pub delta: f64,
    pub error_term: f64,
    /// `e_r_rft − (var_r·r_sft + error_term)`.
    pub identity_residual: f64,
    pub mode: RiskMode,
    /// Responses enumerated (exact) or sampled (Monte Carlo).
    pub n_responses: usize,
    /// Standard error of `e_r_rft` (Monte Carlo only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_r_rft_se: Option<f64>,
}

impl RiskReport {
    /// Whether the identity residual is held to [`IDENTITY_TOLERANCE`].
    pub fn residual_asserted(&self) -> bool {
        self.mode == RiskMode::Exact
    }
}

/// Weighted terms `(weight, reward, I)`; weights sum to 1.
fn decompose(terms: &[(f64, f64, f64)], r_sft: f64) -> (f64, f64, f64, f64, f64, f64) {
    let b: f64 = terms.iter().map(|(w, r, _)| w * r).sum();
    let var_r: f64 = terms.iter().map(|(w, r, _)| w * (r - b) * (r - b)).sum();
    let e_i: f64 = terms.iter().map(|(w, _, i)| w * i).sum();
    let e_r_rft: f64 = terms.iter().map(|(w, r, i)| w * (r - b) * (r - b) * i).sum();
    let eps1: f64 = terms
        .iter()
        .map(|(w, r, i)| w * ((r - b) * (r - b) - var_r) * (i - e_i))
        .sum();
    let delta = e_i - r_sft;
    let error_term = var_r * delta + eps1;
    let residual = e_r_rft - (var_r * r_sft + error_term);
    (e_r_rft, var_r, eps1, delta, error_term, residual)
}

#[allow(clippy::too_many_arguments)]
pub fn theorem1_decomposition<P: Policy>(
    bank: &ScoreBank,
    policy: &P,
    theta: &[f64],
    x: &Prompt,
    a_star: &Response,
    reward: &(dyn Fn(&Response) -> f64 + Sync),
    cfg: &RiskConfig,
) -> Result<RiskReport> {
    let r_sft = bank.iwsn(policy, theta, x, a_star)?;
    let exact = match cfg.mode {
        RiskMode::Exact => Some(policy.response_distribution(theta, x, cfg.enumeration_limit)?),
        RiskMode::MonteCarlo => None,
        RiskMode::Auto => match policy.response_distribution(theta, x, cfg.enumeration_limit) {
            Ok(d) => Some(d),
            Err(Error::EnumerationRefused { .. }) => None,
            Err(e) => return Err(e),
        },
    };
    let (terms, mode, se) = match exact {
        Some(dist) => {
            let terms = dist
                .par_iter()
                .map(|(a, p)| Ok((*p, reward(a), bank.iwsn(policy, theta, x, a)?)))
                .collect::<Result<Vec<_>>>()?;
            (terms, RiskMode::Exact, None)
        }
        None => {
            if cfg.mc_samples < 2 {
                return Err(invalid("Monte Carlo risk needs at least 2 samples"));
            }
            let mut rng = seed::rng(cfg.seed);
            let samples = (0..cfg.mc_samples)
                .map(|_| policy.sample(theta, x, 1.0, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            // IWSN is the expensive part; most samples repeat.
            let mut unique: Vec<&Response> = samples.iter().collect();
            unique.sort();
            unique.dedup();
            let iw = unique
                .par_iter()
                .map(|a| Ok(((*a).clone(), bank.iwsn(policy, theta, x, a)?)))
                .collect::<Result<HashMap<Response, f64>>>()?;
            let w = 1.0 / samples.len() as f64;
            let terms: Vec<(f64, f64, f64)> = samples.iter().map(|a| (w, reward(a), iw[a])).collect();
            let b: f64 = terms.iter().map(|(w, r, _)| w * r).sum();
            let vals: Vec<f64> = terms.iter().map(|(_, r, i)| (r - b) * (r - b) * i).collect();
            let m = vals.iter().sum::<f64>() * w;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            (terms, RiskMode::MonteCarlo, Some(sd / (vals.len() as f64).sqrt()))
        }
    };
    let (e_r_rft, var_r, eps1, delta, error_term, identity_residual) = decompose(&terms, r_sft);
    let report = RiskReport {
        r_sft,
        e_r_rft,
        var_r,
        eps1,
        delta,
        error_term,
        identity_residual,
        mode,
        n_responses: terms.len(),
        e_r_rft_se: se,
    };
    if report.residual_asserted() && identity_residual.abs() > IDENTITY_TOLERANCE {
        return Err(Error::Integrity(format!(
            "risk identity residual {identity_residual} exceeds {IDENTITY_TOLERANCE}"
        )));
    }
    Ok(report)
}

fn default_probe_size() -> usize {
    16
}
fn default_bank_per_task() -> Option<usize> {
    Some(64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    /// Leading training examples of task `k` used as probes.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    /// Leading training examples per past task in the bank (all when null).
    #[serde(default = "default_bank_per_task")]
    pub bank_per_task: Option<usize>,
    #[serde(default)]
    pub risk: RiskConfig,
}

impl Default for TraceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Probe-averaged risk quantities at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub task: usize,
    pub step: usize,
    pub r_sft: f64,
    pub e_r_rft: f64,
    pub var_r: f64,
    pub eps1: f64,
    pub delta: f64,
    pub error_term: f64,
    /// Largest absolute per-probe identity residual.
    pub max_abs_residual: f64,
    pub mode: RiskMode,
    /// Probes evaluated in exact mode; residuals are asserted only for those.
    pub exact_probes: usize,
    pub probes: usize,
}

/// Averages the decomposition over probe examples of `tasks[k]`, with the
/// bank rebuilt from tasks `0..k` at `theta`.
pub fn trace_point(
    policy: &PolicyModel,
    theta: &[f64],
    tasks: &[TaskDataset],
    k: usize,
    step: usize,
    cfg: &TraceConfig,
) -> Result<TracePoint> {
    if k == 0 || k >= tasks.len() {
        return Err(invalid(format!("task {k} has no past tasks to build a bank from")));
    }
    let task = &tasks[k];
    let probes = &task.train[..cfg.probe_size.min(task.train.len())];
    if probes.is_empty() {
        return Err(invalid("probe set is empty"));
    }
    let bank = ScoreBank::from_tasks(policy, theta, &tasks[..k], cfg.bank_per_task)?;
    let vocab = policy.vocab();
    let reports = probes
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let reward = |a: &Response| overall_reward(vocab, a, &ex.target, &task.reward);
            let risk_cfg = RiskConfig {
                seed: seed::derive(cfg.risk.seed, &[k as u64, step as u64, i as u64]),
                ..cfg.risk.clone()
            };
            theorem1_decomposition(&bank, policy, theta, &ex.prompt, &ex.target, &reward, &risk_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let avg = |f: fn(&RiskReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let exact_probes = reports.iter().filter(|r| r.mode == RiskMode::Exact).count();
    Ok(TracePoint {
        task: k,
        step,
        r_sft: avg(|r| r.r_sft),
        e_r_rft: avg(|r| r.e_r_rft),
        var_r: avg(|r| r.var_r),
        eps1: avg(|r| r.eps1),
        delta: avg(|r| r.delta),
        error_term: avg(|r| r.error_term),
        max_abs_residual: reports.iter().map(|r| r.identity_residual.abs()).fold(0.0, f64::max),
        mode: if exact_probes == reports.len() {
            RiskMode::Exact
        } else {
            RiskMode::MonteCarlo
        },
        exact_probes,
        probes: reports.len(),
    })
}

/// Risk quantities along a run: for every task `k ≥ 1`, at the parameters
/// entering the task, at each saved snapshot inside it, and at its end.
pub fn risk_trace(record: &RunRecord, tasks: &[TaskDataset], cfg: &TraceConfig) -> Result<Vec<TracePoint>> {
    if record.checkpoints.len() < 2 {
        return Err(invalid("risk trace needs a run with at least two completed tasks"));
    }
    let steps_per_task = record.steps.iter().filter(|s| s.task == 1).count();
    let mut points = Vec::new();
    for k in 1..record.checkpoints.len().min(tasks.len()) {
        let mut thetas: Vec<(usize, &ParamVector)> = vec![(0, &record.checkpoints[k - 1])];
        thetas.extend(
            record
                .snapshots
                .iter()
                .filter(|s| s.task == k && s.step > 0 && s.step < steps_per_task.max(1))
                .map(|s| (s.step, &s.theta)),
        );
        let end_step = record.steps.iter().filter(|s| s.task == k).count();
        thetas.push((end_step, &record.checkpoints[k]));
        for (step, theta) in thetas {
            points.push(trace_point(&record.policy, theta, tasks, k, step, cfg)?);
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn zero_update_has_zero_risk() {
        let bank = ScoreBank::from_vectors(vec![pv(&[1.0, 2.0]), pv(&[0.5, -1.0])]).unwrap();
        assert_eq!(bank.forgetting_risk(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_update_has_zero_risk() {
        let bank = ScoreBank::from_vectors(vec![pv(&[1.0, 0.0, 0.0]), pv(&[2.0, 0.0, 0.0])]).unwrap();
        assert_eq!(bank.forgetting_risk(&[0.0, 3.0, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn duplicated_entries_leave_normalized_risk_unchanged() {
        let s = pv(&[0.3, -0.7, 1.1]);
        let g = [0.2, 0.5, -0.4];
        let one = ScoreBank::from_vectors(vec![s.clone()]).unwrap();
        let two = ScoreBank::from_vectors(vec![s.clone(), s]).unwrap();
        assert_eq!(one.forgetting_risk(&g).unwrap(), two.forgetting_risk(&g).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let bank = ScoreBank::from_vectors(vec![pv(&[1.0, 2.0])]).unwrap();
        assert!(bank.forgetting_risk(&[1.0]).is_err());
        assert!(ScoreBank::from_vectors(vec![pv(&[1.0]), pv(&[1.0, 2.0])]).is_err());
        assert!(ScoreBank::from_vectors(vec![]).is_err());
    }

    #[test]
    fn decomposition_of_constant_reward_is_zero() {
        let terms = [(0.25, 0.6, 1.0), (0.75, 0.6, 3.0)];
        let (e, var, eps1, _, _, res) = decompose(&terms, 2.0);
        assert_eq!((e, var, eps1, res), (0.0, 0.0, 0.0, 0.0));
    }
}
