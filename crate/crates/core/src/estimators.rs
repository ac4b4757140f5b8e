//! Gradient estimators: supervised NLL and the policy-gradient family
//! (REINFORCE, GRPO, ReMax, RLOO), plus a sequence-level KL penalty.
//!
//! SFT returns the gradient of a loss (descend it); every RFT estimator
//! returns an ascent direction on expected reward. [`GradEstimate::sense`]
//! records which, so the optimizer never has to guess.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::param::ParamVector;
use crate::policy::{Policy, Prompt, Response, DEFAULT_ENUMERATION_LIMIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sft,
    Reinforce,
    Grpo,
    Remax,
    Rloo,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Sft => "sft",
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Grpo => "grpo",
            EstimatorKind::Remax => "remax",
            EstimatorKind::Rloo => "rloo",
        }
    }

    pub fn is_rft(self) -> bool {
        self != EstimatorKind::Sft
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradSense {
    /// Gradient of a loss; the optimizer subtracts it.
    Descent,
    /// Gradient of an objective; the optimizer adds it.
    Ascent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub grad: ParamVector,
    pub estimator: EstimatorKind,
    pub sense: GradSense,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_mean_reward: Option<f64>,
    /// Mean over groups of the within-group population variance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_reward_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_value: Option<f64>,
}

impl GradEstimate {
    /// Direction that improves the objective: `grad` for ascent, `-grad` for descent.
    pub fn improvement_sign(&self) -> f64 {
        match self.sense {
            GradSense::Ascent => 1.0,
            GradSense::Descent => -1.0,
        }
    }
}

/// `n` responses to one prompt with their rewards and log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(prompt: Prompt, responses: Vec<Response>, rewards: Vec<f64>, log_probs: Vec<f64>) -> Result<Self> {
        let n = responses.len();
        if n == 0 || rewards.len() != n || log_probs.len() != n {
            return Err(invalid(format!(
                "rollout group needs n >= 1 aligned entries, got {} responses, {} rewards, {} log-probs",
                n,
                rewards.len(),
                log_probs.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(invalid(format!("reward {r} outside [0, 1]")));
        }
        Ok(Self {
            prompt,
            responses,
            rewards,
            log_probs,
        })
    }

    /// Samples `n` responses at `temperature` and scores them with `reward`.
    pub fn sample<P: Policy, R: rand::Rng + ?Sized>(
        policy: &P,
        theta: &[f64],
        prompt: &Prompt,
        n: usize,
        temperature: f64,
        rng: &mut R,
        reward: impl Fn(&Response) -> f64,
    ) -> Result<Self> {
        let mut responses = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        for _ in 0..n {
            let a = policy.sample(theta, prompt, temperature, rng)?;
            rewards.push(reward(&a));
            log_probs.push(policy.log_prob(theta, prompt, &a)?);
            responses.push(a);
        }
        Self::new(prompt.clone(), responses, rewards, log_probs)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }

    pub fn reward_variance(&self) -> f64 {
        population_variance(&self.rewards)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Sum over the enumerated response space.
    Exact,
    /// Average of `log π_θ(a) − log π_ref(a)` over the group's own samples.
    MonteCarlo,
}

fn default_beta() -> f64 {
    0.01
}
fn default_kl_mode() -> KlMode {
    KlMode::Exact
}
fn default_limit() -> u64 {
    DEFAULT_ENUMERATION_LIMIT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_kl_mode")]
    pub mode: KlMode,
    #[serde(default = "default_limit")]
    pub enumeration_limit: u64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            mode: default_kl_mode(),
            enumeration_limit: default_limit(),
        }
    }
}

/// A KL penalty bound to its reference parameters.
#[derive(Clone, Copy, Debug)]
pub struct KlPenalty<'a> {
    pub config: &'a KlConfig,
    pub theta_ref: &'a [f64],
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Computes one vector per item in parallel and sums them in item order, so
/// the result does not depend on the number of worker threads.
pub(crate) fn ordered_sum<T: Sync>(
    items: &[T],
    dim: usize,
    f: impl Fn(&T, &mut [f64]) -> Result<()> + Sync,
) -> Result<ParamVector> {
    let parts = items
        .par_iter()
        .map(|item| {
            let mut g = vec![0.0; dim];
            f(item, &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ParamVector::zeros(dim);
    for part in &parts {
        total.axpy(1.0, part);
    }
    Ok(total)
}

fn check_finite(g: &ParamVector, what: &str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{what} gradient is not finite")))
    }
}

/// Gradient of the batch NLL `-(1/|B|) Σ log π(a* | x)`.
pub fn sft_gradient<P: Policy>(policy: &P, theta: &[f64], batch: &[(&Prompt, &Response)]) -> Result<GradEstimate> {
    if batch.is_empty() {
        return Err(invalid("SFT batch is empty"));
    }
    let w = -1.0 / batch.len() as f64;
    let grad = ordered_sum(batch, policy.num_params(), |(x, a), g| policy.add_score(theta, x, a, w, g))?;
    check_finite(&grad, "SFT")?;
    Ok(GradEstimate {
        grad,
        estimator: EstimatorKind::Sft,
        sense: GradSense::Descent,
        batch_mean_reward: None,
        batch_reward_variance: None,
        kl_value: None,
    })
}

/// Group-normalized advantages `(r_i − mean) / std` with population std.
/// A group whose std falls below `sigma_floor` carries no signal and gets
/// all-zero advantages.
pub fn grpo_advantages(rewards: &[f64], sigma_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid(format!("GRPO needs a group of at least 2, got {}", rewards.len())));
    }
    let m = mean(rewards);
    let sd = population_variance(rewards).sqrt();
    if sd < sigma_floor || sd == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - m) / sd).collect())
}

/// Leave-one-out coefficients `r_i − mean_{j≠i} r_j`.
pub fn rloo_coefficients(rewards: &[f64]) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(invalid(format!("RLOO needs a group of at least 2, got {n}")));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|&r| {
            let others = (total - r) / (n - 1) as f64;
            // Exact zero when every reward is equal, regardless of rounding in `total`.
            if rewards.iter().all(|&o| o == r) {
                0.0
            } else {
                r - others
            }
        })
        .collect())
}

fn batch_stats(groups: &[RolloutGroup]) -> (f64, f64) {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let var = groups.iter().map(RolloutGroup::reward_variance).sum::<f64>() / groups.len() as f64;
    (mean(&all), var)
}

fn rft_estimate(
    kind: EstimatorKind,
    groups: &[RolloutGroup],
    grad: ParamVector,
    kl_value: Option<f64>,
) -> Result<GradEstimate> {
    check_finite(&grad, kind.name())?;
    let (m, v) = batch_stats(groups);
    Ok(GradEstimate {
        grad,
        estimator: kind,
        sense: GradSense::Ascent,
        batch_mean_reward: Some(m),
        batch_reward_variance: Some(v),
        kl_value,
    })
}

fn non_empty(groups: &[RolloutGroup]) -> Result<()> {
    if groups.is_empty() {
        Err(invalid("no rollout groups"))
    } else {
        Ok(())
    }
}

/// Mean over groups of `Σ_i A_i ∇log π(a_i|x) − β ∇KL(π_θ(·|x) ‖ π_ref(·|x))`.
pub fn grpo_gradient<P: Policy>(
    policy: &P,
    theta: &[f64],
    groups: &[RolloutGroup],
    sigma_floor: f64,
    kl: Option<KlPenalty<'_>>,
) -> Result<GradEstimate> {
    non_empty(groups)?;
    let dim = policy.num_params();
    let w = 1.0 / groups.len() as f64;
    let advantages = groups
        .iter()
        .map(|g| grpo_advantages(&g.rewards, sigma_floor))
        .collect::<Result<Vec<_>>>()?;
    let indexed: Vec<usize> = (0..groups.len()).collect();
    let mut grad = ordered_sum(&indexed, dim, |&k, g| {
        let group = &groups[k];
        for (a, &adv) in group.responses.iter().zip(&advantages[k]) {
            policy.add_score(theta, &group.prompt, a, w * adv, g)?;
        }
        Ok(())
    })?;

    let mut kl_value = None;
    if let Some(pen) = kl {
        let parts = groups
            .par_iter()
            .map(|group| match pen.config.mode {
                KlMode::Exact => kl_exact(policy, theta, pen.theta_ref, &group.prompt, pen.config.enumeration_limit),
                KlMode::MonteCarlo => kl_monte_carlo(policy, theta, pen.theta_ref, &group.prompt, &group.responses),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for (value, kl_grad) in &parts {
            total += value;
            grad.axpy(-pen.config.beta * w, kl_grad);
        }
        kl_value = Some(total * w);
    }
    rft_estimate(EstimatorKind::Grpo, groups, grad, kl_value)
}

/// Mean over all samples of `(r(a) − r(a_greedy)) ∇log π(a|x)`.
/// `greedy_rewards[k]` is the reward of the greedy response to group `k`'s prompt.
pub fn remax_gradient<P: Policy>(
    policy: &P,
    theta: &[f64],
    groups: &[RolloutGroup],
    greedy_rewards: &[f64],
) -> Result<GradEstimate> {
    non_empty(groups)?;
    if greedy_rewards.len() != groups.len() {
        return Err(invalid("one greedy reward per group required"));
    }
    let n: usize = groups.iter().map(RolloutGroup::len).sum();
    let w = 1.0 / n as f64;
    let indexed: Vec<usize> = (0..groups.len()).collect();
    let grad = ordered_sum(&indexed, policy.num_params(), |&k, g| {
        let group = &groups[k];
        for (a, &r) in group.responses.iter().zip(&group.rewards) {
            let c = r - greedy_rewards[k];
            policy.add_score(theta, &group.prompt, a, w * c, g)?;
        }
        Ok(())
    })?;
    rft_estimate(EstimatorKind::Remax, groups, grad, None)
}

/// Mean over groups of `(1/n) Σ_i (r_i − mean_{j≠i} r_j) ∇log π(a_i|x)`.
pub fn rloo_gradient<P: Policy>(policy: &P, theta: &[f64], groups: &[RolloutGroup]) -> Result<GradEstimate> {
    non_empty(groups)?;
    let coefs = groups
        .iter()
        .map(|g| rloo_coefficients(&g.rewards))
        .collect::<Result<Vec<_>>>()?;
    let per_group = 1.0 / groups.len() as f64;
    let indexed: Vec<usize> = (0..groups.len()).collect();
    let grad = ordered_sum(&indexed, policy.num_params(), |&k, g| {
        let group = &groups[k];
        let w = per_group / group.len() as f64;
        for (a, &c) in group.responses.iter().zip(&coefs[k]) {
            policy.add_score(theta, &group.prompt, a, w * c, g)?;
        }
        Ok(())
    })?;
    rft_estimate(EstimatorKind::Rloo, groups, grad, None)
}

/// Mean over all samples of `(r − baseline) ∇log π(a|x)`.
pub fn reinforce_gradient<P: Policy>(
    policy: &P,
    theta: &[f64],
    groups: &[RolloutGroup],
    baseline: f64,
) -> Result<GradEstimate> {
    non_empty(groups)?;
    let n: usize = groups.iter().map(RolloutGroup::len).sum();
    let w = 1.0 / n as f64;
    let indexed: Vec<usize> = (0..groups.len()).collect();
    let grad = ordered_sum(&indexed, policy.num_params(), |&k, g| {
        let group = &groups[k];
        for (a, &r) in group.responses.iter().zip(&group.rewards) {
            policy.add_score(theta, &group.prompt, a, w * (r - baseline), g)?;
        }
        Ok(())
    })?;
    rft_estimate(EstimatorKind::Reinforce, groups, grad, None)
}

/// `KL(π_θ(·|x) ‖ π_ref(·|x))` and its gradient w.r.t. θ.
pub fn kl_divergence<P: Policy, R: rand::Rng + ?Sized>(
    policy: &P,
    theta: &[f64],
    theta_ref: &[f64],
    x: &Prompt,
    config: &KlConfig,
    mc_samples: usize,
    rng: &mut R,
) -> Result<(f64, ParamVector)> {
    match config.mode {
        KlMode::Exact => kl_exact(policy, theta, theta_ref, x, config.enumeration_limit),
        KlMode::MonteCarlo => {
            if mc_samples == 0 {
                return Err(invalid("Monte Carlo KL needs at least one sample"));
            }
            let samples = (0..mc_samples)
                .map(|_| policy.sample(theta, x, 1.0, rng))
                .collect::<Result<Vec<_>>>()?;
            kl_monte_carlo(policy, theta, theta_ref, x, &samples)
        }
    }
}

/// Exact sequence-level KL by enumeration. Gradient:
/// `Σ_a π(a) (log π(a) − log π_ref(a)) ∇log π(a)` (the `Σ π ∇log π` term vanishes).
pub fn kl_exact<P: Policy>(
    policy: &P,
    theta: &[f64],
    theta_ref: &[f64],
    x: &Prompt,
    limit: u64,
) -> Result<(f64, ParamVector)> {
    policy.check_theta(theta_ref)?;
    let dist = policy.response_log_distribution(theta, x, limit)?;
    let mut terms = Vec::with_capacity(dist.len());
    for (a, lp) in &dist {
        let ratio = lp - policy.log_prob(theta_ref, x, a)?;
        terms.push((a, lp.exp(), ratio));
    }
    let value: f64 = terms.iter().map(|(_, p, ratio)| p * ratio).sum();
    let grad = ordered_sum(&terms, policy.num_params(), |(a, p, ratio), g| {
        policy.add_score(theta, x, a, p * ratio, g)
    })?;
    // Gibbs guarantees KL >= 0; clip rounding noise of near-identical policies.
    Ok((value.max(0.0), grad))
}

/// Sample-average KL estimate over responses drawn from `π_θ`, with the
/// matching score-function gradient estimate.
pub fn kl_monte_carlo<P: Policy>(
    policy: &P,
    theta: &[f64],
    theta_ref: &[f64],
    x: &Prompt,
    samples: &[Response],
) -> Result<(f64, ParamVector)> {
    policy.check_theta(theta_ref)?;
    if samples.is_empty() {
        return Err(invalid("Monte Carlo KL needs at least one sample"));
    }
    let w = 1.0 / samples.len() as f64;
    let mut ratios = Vec::with_capacity(samples.len());
    for a in samples {
        ratios.push(policy.log_prob(theta, x, a)? - policy.log_prob(theta_ref, x, a)?);
    }
    let value = mean(&ratios);
    let pairs: Vec<(&Response, f64)> = samples.iter().zip(ratios).collect();
    let grad = ordered_sum(&pairs, policy.num_params(), |(a, ratio), g| {
        policy.add_score(theta, x, a, w * ratio, g)
    })?;
    Ok((value, grad))
}

/// Exact expectations of the estimators above at one prompt, by enumeration.
pub mod exact {
    use std::collections::BTreeMap;

    use super::*;

    /// Distribution of `reward` under `π_θ(·|x)`: `(response, prob, reward)`.
    pub fn reward_table<P: Policy>(
        policy: &P,
        theta: &[f64],
        x: &Prompt,
        reward: &dyn Fn(&Response) -> f64,
        limit: u64,
    ) -> Result<Vec<(Response, f64, f64)>> {
        Ok(policy
            .response_distribution(theta, x, limit)?
            .into_iter()
            .map(|(a, p)| {
                let r = reward(&a);
                (a, p, r)
            })
            .collect())
    }

    /// `Σ_a π(a) c(a) ∇log π(a)`.
    pub fn weighted_score_expectation<P: Policy>(
        policy: &P,
        theta: &[f64],
        x: &Prompt,
        table: &[(Response, f64, f64)],
        coef: impl Fn(f64) -> f64 + Sync,
    ) -> Result<ParamVector> {
        ordered_sum(table, policy.num_params(), |(a, p, r), g| {
            policy.add_score(theta, x, a, p * coef(*r), g)
        })
    }

    pub fn expected_reward(table: &[(Response, f64, f64)]) -> f64 {
        table.iter().map(|(_, p, r)| p * r).sum()
    }

    /// `E[(r − b) ∇log π]` for a constant baseline `b`.
    pub fn reinforce<P: Policy>(
        policy: &P,
        theta: &[f64],
        x: &Prompt,
        table: &[(Response, f64, f64)],
        baseline: f64,
    ) -> Result<ParamVector> {
        weighted_score_expectation(policy, theta, x, table, |r| r - baseline)
    }

    /// RLOO's per-group average has the same mean as REINFORCE with any
    /// constant baseline, because each leave-one-out baseline is independent
    /// of the sample it multiplies.
    pub fn rloo<P: Policy>(
        policy: &P,
        theta: &[f64],
        x: &Prompt,
        table: &[(Response, f64, f64)],
    ) -> Result<ParamVector> {
        let b = expected_reward(table);
        reinforce(policy, theta, x, table, b)
    }

    /// `E[(r(a) − r(a_greedy)) ∇log π(a)]` with the greedy response fixed by θ.
    pub fn remax<P: Policy>(
        policy: &P,
        theta: &[f64],
        x: &Prompt,
        table: &[(Response, f64, f64)],
        greedy_reward: f64,
    ) -> Result<ParamVector> {
        reinforce(policy, theta, x, table, greedy_reward)
    }

    /// Expected GRPO group sum `E[Σ_i A_i ∇log π(a_i)]` for a group of `n`
    /// i.i.d. draws. By exchangeability this is `n · E[A_1 ∇log π(a_1)]`,
    /// and `A_1` depends on the other draws only through their rewards, so
    /// we enumerate the joint law of those `n − 1` rewards over the distinct
    /// reward values.
    pub fn grpo<P: Policy>(
        policy: &P,
        theta: &[f64],
        x: &Prompt,
        table: &[(Response, f64, f64)],
        n: usize,
        sigma_floor: f64,
    ) -> Result<ParamVector> {
        if n < 2 {
            return Err(invalid("GRPO needs a group of at least 2"));
        }
        let mut law: BTreeMap<u64, f64> = BTreeMap::new();
        for (_, p, r) in table {
            *law.entry(r.to_bits()).or_insert(0.0) += p;
        }
        let values: Vec<(f64, f64)> = law.into_iter().map(|(b, p)| (f64::from_bits(b), p)).collect();
        let others = n - 1;
        let combos = values.len().checked_pow(others as u32).filter(|&c| c <= 1 << 22);
        let combos = combos.ok_or_else(|| invalid("too many reward configurations to enumerate"))?;

        // g(r) = E_{others}[A_1 | r_1 = r] for each distinct reward value.
        let mut g_of = BTreeMap::new();
        for &(r1, _) in &values {
            let mut expect = 0.0;
            let mut rewards = vec![0.0; n];
            rewards[0] = r1;
            for code in 0..combos {
                let mut c = code;
                let mut prob = 1.0;
                for slot in rewards.iter_mut().skip(1) {
                    let (v, p) = values[c % values.len()];
                    c /= values.len();
                    *slot = v;
                    prob *= p;
                }
                if prob == 0.0 {
                    continue;
                }
                expect += prob * grpo_advantages(&rewards, sigma_floor)?[0];
            }
            g_of.insert(r1.to_bits(), expect);
        }
        weighted_score_expectation(policy, theta, x, table, |r| n as f64 * g_of[&r.to_bits()])
    }
}
