//! Synthetic interfering task streams and rule-based rewards.
//!
//! A context is `one-hot(bucket) ⊕ dense noise features`. Each task maps a
//! set of buckets to answer tokens; consecutive tasks share a fraction of
//! their buckets and always disagree on the shared ones, so learning a task
//! overwrites part of its predecessor.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::{Prompt, Response, Token, Vocab};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatTemplate {
    pub require_think_block: bool,
    pub think_len_max: usize,
    /// Tokens accepted in the answer slot.
    pub answer_tokens: Vec<Token>,
}

impl FormatTemplate {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if vocab.ans().is_none() || vocab.eos().is_none() {
            return Err(invalid("format template needs ANS and EOS tokens"));
        }
        if self.require_think_block && (vocab.think_open().is_none() || vocab.think_close().is_none()) {
            return Err(invalid("think block required but vocabulary lacks THINK tokens"));
        }
        if self.answer_tokens.is_empty() || !self.answer_tokens.iter().all(|&t| vocab.is_content(t)) {
            return Err(invalid("answer slot tokens must be non-empty content tokens"));
        }
        Ok(())
    }

    /// Length of the longest conforming response.
    pub fn response_len(&self) -> usize {
        if self.require_think_block {
            5 + self.think_len_max
        } else {
            3
        }
    }

    /// Conforming response with the given think content and answer.
    pub fn render(&self, vocab: &Vocab, think: &[Token], answer: Token) -> Result<Response> {
        self.validate(vocab)?;
        let mut tokens = Vec::with_capacity(self.response_len());
        if self.require_think_block {
            if think.len() > self.think_len_max || !think.iter().all(|&t| vocab.is_content(t)) {
                return Err(invalid("think content must be at most think_len_max content tokens"));
            }
            tokens.push(vocab.think_open().unwrap());
            tokens.extend_from_slice(think);
            tokens.push(vocab.think_close().unwrap());
        } else if !think.is_empty() {
            return Err(invalid("template has no think block"));
        }
        tokens.push(vocab.ans().unwrap());
        tokens.push(answer);
        tokens.push(vocab.eos().unwrap());
        Ok(Response::new(tokens))
    }

    /// Exact structural match: `[THINK_OPEN free* THINK_CLOSE] ANS answer EOS`.
    pub fn conforms(&self, vocab: &Vocab, a: &Response) -> bool {
        let (Some(ans), Some(eos)) = (vocab.ans(), vocab.eos()) else {
            return false;
        };
        let mut rest: &[Token] = a;
        if self.require_think_block {
            let (Some(open), Some(close)) = (vocab.think_open(), vocab.think_close()) else {
                return false;
            };
            if rest.first() != Some(&open) {
                return false;
            }
            let Some(close_at) = rest.iter().position(|&t| t == close) else {
                return false;
            };
            let think = &rest[1..close_at];
            if think.len() > self.think_len_max || !think.iter().all(|&t| vocab.is_content(t)) {
                return false;
            }
            rest = &rest[close_at + 1..];
        }
        matches!(rest, [a0, answer, e] if *a0 == ans && *e == eos && self.answer_tokens.contains(answer))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub w_acc: f64,
    pub w_format: f64,
    pub template: FormatTemplate,
}

impl RewardSpec {
    pub fn new(w_acc: f64, w_format: f64, template: FormatTemplate) -> Result<Self> {
        let spec = Self {
            w_acc,
            w_format,
            template,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_acc >= 0.0 && self.w_format >= 0.0) || (self.w_acc + self.w_format - 1.0).abs() > 1e-12 {
            return Err(invalid(format!(
                "reward weights must be non-negative and sum to 1, got {} + {}",
                self.w_acc, self.w_format
            )));
        }
        Ok(())
    }
}

/// The answer-slot token: the token after the first ANS that is not inside
/// a think block. Think content is ignored.
pub fn extract_answer(vocab: &Vocab, a: &Response) -> Option<Token> {
    let mut in_think = false;
    for (i, &t) in a.iter().enumerate() {
        if vocab.is_eos(t) {
            break;
        }
        if in_think {
            in_think = vocab.think_close() != Some(t);
            continue;
        }
        if vocab.think_open() == Some(t) {
            in_think = true;
        } else if vocab.ans() == Some(t) {
            return a.get(i + 1).copied().filter(|&n| vocab.is_content(n));
        }
    }
    None
}

pub fn accuracy_reward(vocab: &Vocab, a: &Response, a_star: &Response) -> f64 {
    match (extract_answer(vocab, a), extract_answer(vocab, a_star)) {
        (Some(x), Some(y)) if x == y => 1.0,
        _ => 0.0,
    }
}

pub fn format_reward(vocab: &Vocab, a: &Response, template: &FormatTemplate) -> f64 {
    if template.conforms(vocab, a) {
        1.0
    } else {
        0.0
    }
}

pub fn overall_reward(vocab: &Vocab, a: &Response, a_star: &Response, spec: &RewardSpec) -> f64 {
    spec.w_acc * accuracy_reward(vocab, a, a_star) + spec.w_format * format_reward(vocab, a, &spec.template)
}

/// Deterministic bucket → answer rule of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Width of the one-hot bucket block at the front of every context.
    pub n_buckets: usize,
    pub buckets: Vec<usize>,
    pub answers: Vec<Token>,
    /// Tasks chained by shared buckets carry the same group id.
    pub interference_group: usize,
    pub incompetent: bool,
}

impl TaskSpec {
    pub fn bucket_of(&self, context: &[f64]) -> usize {
        crate::policy::argmax(&context[..self.n_buckets])
    }

    pub fn answer_for(&self, context: &[f64]) -> Option<Token> {
        let b = self.bucket_of(context);
        self.buckets.iter().position(|&x| x == b).map(|i| self.answers[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    /// Unique within its task across both splits.
    pub id: usize,
    pub prompt: Prompt,
    pub answer: Token,
    pub target: Response,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub reward: RewardSpec,
    pub train: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub seed: u64,
}

impl TaskDataset {
    pub fn task_id(&self) -> usize {
        self.spec.task_id
    }

    /// Same task with a different training split.
    pub fn with_train(&self, train: Vec<TaskExample>) -> Self {
        Self {
            train,
            ..self.clone()
        }
    }
}

fn default_n_tasks() -> usize {
    5
}
fn default_train_size() -> usize {
    256
}
fn default_test_size() -> usize {
    128
}
fn default_overlap() -> f64 {
    0.5
}
fn default_buckets_per_task() -> usize {
    8
}
fn default_n_answers() -> usize {
    4
}
fn default_reserved() -> usize {
    2
}
fn default_feature_dim() -> usize {
    4
}
fn default_feature_scale() -> f64 {
    0.5
}
fn default_bucket_signal() -> f64 {
    4.0
}
fn default_think_len_max() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_w_acc() -> f64 {
    0.9
}
fn default_w_format() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Fraction of a task's buckets shared (with conflicting answers) with the next task.
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_buckets_per_task")]
    pub buckets_per_task: usize,
    /// Size of the ordinary answer alphabet, tokens `0..n_answers`.
    #[serde(default = "default_n_answers")]
    pub n_answers: usize,
    /// Extra content tokens never used as ordinary answers; incompetent tasks answer with them.
    #[serde(default = "default_reserved")]
    pub reserved_answers: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_feature_scale")]
    pub feature_scale: f64,
    /// Value of the bucket indicator in the context.
    #[serde(default = "default_bucket_signal")]
    pub bucket_signal: f64,
    #[serde(default = "default_think_len_max")]
    pub think_len_max: usize,
    #[serde(default = "default_true")]
    pub require_think_block: bool,
    #[serde(default = "default_w_acc")]
    pub w_acc: f64,
    #[serde(default = "default_w_format")]
    pub w_format: f64,
    /// Indices of tasks drawn on fresh buckets with reserved answers, which a
    /// policy pretrained on the ordinary alphabet almost never solves.
    #[serde(default)]
    pub incompetent_tasks: Vec<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl StreamConfig {
    /// Direct-answer variant: no think block, accuracy-only reward.
    pub fn with_format_off(&self) -> Self {
        Self {
            require_think_block: false,
            w_acc: 1.0,
            w_format: 0.0,
            ..self.clone()
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_format(self.n_answers + self.reserved_answers)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_tasks == 0 {
            errs.push("n_tasks: must be at least 1".into());
        }
        if self.train_size == 0 || self.test_size == 0 {
            errs.push("train_size/test_size: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            errs.push(format!("overlap: {} not in [0, 1]", self.overlap));
        }
        if self.buckets_per_task == 0 {
            errs.push("buckets_per_task: must be positive".into());
        }
        if self.n_answers == 0 || (self.overlap > 0.0 && self.n_answers < 2) {
            errs.push("n_answers: need at least 2 answers to build conflicting tasks".into());
        }
        if self.n_answers + self.reserved_answers > Vocab::MAX_SIZE - 4 {
            errs.push(format!(
                "n_answers + reserved_answers: at most {} content tokens fit the vocabulary",
                Vocab::MAX_SIZE - 4
            ));
        }
        if !self.incompetent_tasks.is_empty() && self.reserved_answers == 0 {
            errs.push("reserved_answers: incompetent tasks need reserved answer tokens".into());
        }
        if let Some(t) = self.incompetent_tasks.iter().find(|&&t| t >= self.n_tasks) {
            errs.push(format!("incompetent_tasks: index {t} out of range"));
        }
        if !(self.feature_scale >= 0.0 && self.feature_scale.is_finite()) {
            errs.push("feature_scale: must be finite and non-negative".into());
        }
        if !(self.bucket_signal > 0.0 && self.bucket_signal.is_finite()) {
            errs.push("bucket_signal: must be finite and positive".into());
        }
        if !(self.w_acc >= 0.0 && self.w_format >= 0.0) || (self.w_acc + self.w_format - 1.0).abs() > 1e-12 {
            errs.push("w_acc/w_format: must be non-negative and sum to 1".into());
        }
        errs
    }

    pub fn template(&self, answer_tokens: Vec<Token>) -> FormatTemplate {
        FormatTemplate {
            require_think_block: self.require_think_block,
            think_len_max: self.think_len_max,
            answer_tokens,
        }
    }

    /// L_max of policies trained on this stream.
    pub fn max_len(&self) -> usize {
        self.template(vec![0]).response_len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub seed: u64,
    pub vocab: Vocab,
    pub n_buckets: usize,
    pub tasks: Vec<TaskDataset>,
}

impl TaskStream {
    pub fn context_dim(&self) -> usize {
        self.n_buckets + self.config.feature_dim
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len()
    }

    pub fn ordinary_answers(&self) -> Vec<Token> {
        (0..self.config.n_answers).collect()
    }

    /// Buckets belonging to ordinary (non-incompetent) tasks.
    pub fn ordinary_buckets(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.tasks
            .iter()
            .filter(|t| !t.spec.incompetent)
            .flat_map(|t| t.spec.buckets.iter().copied())
            .filter(|b| seen.insert(*b))
            .collect()
    }

    /// Context for `bucket` with features drawn from `rng`.
    pub fn make_context<R: Rng + ?Sized>(&self, bucket: usize, rng: &mut R) -> Vec<f64> {
        make_context(self.n_buckets, bucket, &self.config, rng)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for task in &self.tasks {
            for (split, examples) in [("train", &task.train), ("test", &task.test)] {
                let path = dir.join(format!("task_{}_{split}.jsonl", task.task_id()));
                let mut w = BufWriter::new(fs::File::create(path)?);
                for ex in examples {
                    serde_json::to_writer(&mut w, &ExampleRecord::from(ex))?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
        }
        let manifest = StreamManifest {
            task_order: self.tasks.iter().map(|t| t.task_id()).collect(),
            seed: self.seed,
            task_seeds: self.tasks.iter().map(|t| t.seed).collect(),
            overlap: self.config.overlap,
            n_buckets: self.n_buckets,
            config: self.config.clone(),
        };
        fs::write(dir.join("stream_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task_id: usize,
    pub context: Vec<f64>,
    pub prompt_tokens: Vec<Token>,
    pub answer_token: Token,
}

impl From<&TaskExample> for ExampleRecord {
    fn from(ex: &TaskExample) -> Self {
        Self {
            task_id: ex.prompt.task_id,
            context: ex.prompt.context.clone(),
            prompt_tokens: ex.prompt.prompt_tokens.clone(),
            answer_token: ex.answer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub task_order: Vec<usize>,
    pub seed: u64,
    pub task_seeds: Vec<u64>,
    pub overlap: f64,
    pub n_buckets: usize,
    pub config: StreamConfig,
}

pub fn read_examples(path: &Path) -> Result<Vec<ExampleRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn make_context<R: Rng + ?Sized>(n_buckets: usize, bucket: usize, cfg: &StreamConfig, rng: &mut R) -> Vec<f64> {
    let mut ctx = vec![0.0; n_buckets + cfg.feature_dim];
    ctx[bucket] = cfg.bucket_signal;
    for f in &mut ctx[n_buckets..] {
        let z: f64 = StandardNormal.sample(rng);
        *f = cfg.feature_scale * z;
    }
    ctx
}

const MAPPING_STREAM: u64 = 0;
const EXAMPLE_STREAM: u64 = 1;

struct BucketPlan {
    buckets: Vec<usize>,
    answers: Vec<Token>,
    group: usize,
    incompetent: bool,
}

fn plan_buckets(cfg: &StreamConfig, seed: u64) -> (Vec<BucketPlan>, usize) {
    let k = cfg.buckets_per_task;
    let shared = ((cfg.overlap * k as f64).round() as usize).min(k);
    let ordinary: Vec<Token> = (0..cfg.n_answers).collect();
    let reserved: Vec<Token> = (cfg.n_answers..cfg.n_answers + cfg.reserved_answers).collect();
    let mut rng = seed::rng_at(seed, &[MAPPING_STREAM]);
    let mut next_bucket = 0;
    let mut fresh = |n: usize| {
        let out: Vec<usize> = (next_bucket..next_bucket + n).collect();
        next_bucket += n;
        out
    };
    let mut plans: Vec<BucketPlan> = Vec::with_capacity(cfg.n_tasks);
    let mut last_ordinary: Option<usize> = None;
    for t in 0..cfg.n_tasks {
        if cfg.incompetent_tasks.contains(&t) {
            let buckets = fresh(k);
            let answers = buckets.iter().map(|_| reserved[rng.random_range(0..reserved.len())]).collect();
            plans.push(BucketPlan {
                buckets,
                answers,
                group: t,
                incompetent: true,
            });
            continue;
        }
        let plan = match last_ordinary {
            Some(prev) if shared > 0 => {
                let p = &plans[prev];
                let mut buckets = p.buckets[k - shared..].to_vec();
                let mut answers: Vec<Token> = p.answers[k - shared..]
                    .iter()
                    .map(|&old| {
                        let choices: Vec<Token> = ordinary.iter().copied().filter(|&a| a != old).collect();
                        choices[rng.random_range(0..choices.len())]
                    })
                    .collect();
                let group = p.group;
                buckets.extend(fresh(k - shared));
                answers.extend((shared..k).map(|_| ordinary[rng.random_range(0..ordinary.len())]));
                BucketPlan {
                    buckets,
                    answers,
                    group,
                    incompetent: false,
                }
            }
            _ => {
                let buckets = fresh(k);
                let answers = buckets.iter().map(|_| ordinary[rng.random_range(0..ordinary.len())]).collect();
                BucketPlan {
                    buckets,
                    answers,
                    group: t,
                    incompetent: false,
                }
            }
        };
        plans.push(plan);
        last_ordinary = Some(t);
    }
    (plans, next_bucket)
}

/// Builds the task sequence; deterministic given `seed`.
pub fn generate_task_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(invalid(errs.join("; ")));
    }
    let vocab = cfg.vocab()?;
    let (plans, n_buckets) = plan_buckets(cfg, seed);
    let reserved: Vec<Token> = (cfg.n_answers..cfg.n_answers + cfg.reserved_answers).collect();
    let mut tasks = Vec::with_capacity(plans.len());
    for (t, plan) in plans.into_iter().enumerate() {
        let answer_tokens = if plan.incompetent {
            reserved.clone()
        } else {
            (0..cfg.n_answers).collect()
        };
        let template = cfg.template(answer_tokens);
        template.validate(&vocab)?;
        let reward = RewardSpec::new(cfg.w_acc, cfg.w_format, template.clone())?;
        let spec = TaskSpec {
            task_id: t,
            n_buckets,
            buckets: plan.buckets,
            answers: plan.answers,
            interference_group: plan.group,
            incompetent: plan.incompetent,
        };
        let mut prompt_tokens = Vec::new();
        if template.require_think_block {
            prompt_tokens.extend([vocab.think_open().unwrap(), vocab.think_close().unwrap()]);
        }
        prompt_tokens.push(vocab.ans().unwrap());

        let task_seed = seed::derive(seed, &[EXAMPLE_STREAM, t as u64]);
        let mut seen: HashSet<Vec<u64>> = HashSet::new();
        let mut split = |size: usize, id_base: usize, stream: u64| -> Result<Vec<TaskExample>> {
            let mut rng = seed::rng_at(task_seed, &[stream]);
            let mut out = Vec::with_capacity(size);
            for i in 0..size {
                let k = i % spec.buckets.len();
                let context = loop {
                    let c = make_context(n_buckets, spec.buckets[k], cfg, &mut rng);
                    // Splits must not share a context.
                    if seen.insert(c.iter().map(|v| v.to_bits()).collect()) {
                        break c;
                    }
                };
                let answer = spec.answers[k];
                out.push(TaskExample {
                    id: id_base + i,
                    prompt: Prompt {
                        task_id: t,
                        context,
                        prompt_tokens: prompt_tokens.clone(),
                    },
                    answer,
                    target: template.render(&vocab, &[], answer)?,
                });
            }
            Ok(out)
        };
        let train = split(cfg.train_size, 0, 0)?;
        let test = split(cfg.test_size, cfg.train_size, 1)?;
        tasks.push(TaskDataset {
            spec,
            reward,
            train,
            test,
            seed: task_seed,
        });
    }
    Ok(TaskStream {
        config: cfg.clone(),
        seed,
        vocab,
        n_buckets,
        tasks,
    })
}
