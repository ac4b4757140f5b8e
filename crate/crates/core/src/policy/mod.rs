//! Small autoregressive softmax policies with exact log-probabilities,
//! sampling, analytic score functions and exhaustive response enumeration.
//!
//! A response is generated token by token until EOS or `max_len` tokens. The
//! probability of a response is the product of its per-step token
//! probabilities; truncated sequences are not renormalized, so the
//! distribution over [`enumerate_responses`] is proper.

mod checkpoint;
mod enumerate;
mod mlp;
mod tabular;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use enumerate::{check_enumerable, count_responses, enumerate_responses, DEFAULT_ENUMERATION_LIMIT};
pub use mlp::TinyMlp;
pub use tabular::TabularSoftmax;

use crate::error::{invalid, Result};
use crate::param::ParamVector;

pub type Token = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab", into = "RawVocab")]
pub struct Vocab {
    size: usize,
    think_open: Option<Token>,
    think_close: Option<Token>,
    ans: Option<Token>,
    eos: Option<Token>,
}

#[derive(Serialize, Deserialize)]
struct RawVocab {
    size: usize,
    think_open: Option<Token>,
    think_close: Option<Token>,
    ans: Option<Token>,
    eos: Option<Token>,
}

impl TryFrom<RawVocab> for Vocab {
    type Error = crate::Error;

    fn try_from(r: RawVocab) -> Result<Self> {
        Vocab::new(r.size, r.think_open, r.think_close, r.ans, r.eos)
    }
}

impl From<Vocab> for RawVocab {
    fn from(v: Vocab) -> Self {
        RawVocab {
            size: v.size,
            think_open: v.think_open,
            think_close: v.think_close,
            ans: v.ans,
            eos: v.eos,
        }
    }
}

impl Vocab {
    pub const MAX_SIZE: usize = 16;

    pub fn new(
        size: usize,
        think_open: Option<Token>,
        think_close: Option<Token>,
        ans: Option<Token>,
        eos: Option<Token>,
    ) -> Result<Self> {
        if size == 0 || size > Self::MAX_SIZE {
            return Err(invalid(format!(
                "vocabulary size {size} outside 1..={}",
                Self::MAX_SIZE
            )));
        }
        let specials: Vec<Token> = [think_open, think_close, ans, eos]
            .into_iter()
            .flatten()
            .collect();
        for (i, &t) in specials.iter().enumerate() {
            if t >= size {
                return Err(invalid(format!("special token {t} out of vocabulary of size {size}")));
            }
            if specials[..i].contains(&t) {
                return Err(invalid(format!("special token {t} assigned twice")));
            }
        }
        Ok(Self {
            size,
            think_open,
            think_close,
            ans,
            eos,
        })
    }

    /// `n_content` free tokens `0..n_content` followed by THINK_OPEN,
    /// THINK_CLOSE, ANS and EOS.
    pub fn with_format(n_content: usize) -> Result<Self> {
        let n = n_content;
        Self::new(n + 4, Some(n), Some(n + 1), Some(n + 2), Some(n + 3))
    }

    /// A vocabulary with no structural tokens apart from an optional EOS.
    pub fn plain(size: usize, eos: Option<Token>) -> Result<Self> {
        Self::new(size, None, None, None, eos)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn think_open(&self) -> Option<Token> {
        self.think_open
    }

    pub fn think_close(&self) -> Option<Token> {
        self.think_close
    }

    pub fn ans(&self) -> Option<Token> {
        self.ans
    }

    pub fn eos(&self) -> Option<Token> {
        self.eos
    }

    pub fn is_special(&self, t: Token) -> bool {
        [self.think_open, self.think_close, self.ans, self.eos].contains(&Some(t))
    }

    pub fn is_content(&self, t: Token) -> bool {
        t < self.size && !self.is_special(t)
    }

    pub fn content_tokens(&self) -> Vec<Token> {
        (0..self.size).filter(|&t| self.is_content(t)).collect()
    }

    pub fn is_eos(&self, t: Token) -> bool {
        self.eos == Some(t)
    }
}

/// Input to a policy: a dense context plus the (metadata-only) prompt tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub task_id: usize,
    pub context: Vec<f64>,
    pub prompt_tokens: Vec<Token>,
}

impl Prompt {
    pub fn new(task_id: usize, context: Vec<f64>) -> Self {
        Self {
            task_id,
            context,
            prompt_tokens: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response(Vec<Token>);

impl Response {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

impl std::ops::Deref for Response {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for Response {
    fn from(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }
}

/// An autoregressive softmax policy `π_θ(a_t | x, a_<t)`.
///
/// Implementors provide the next-token logits and the reverse-mode product
/// of a logit cotangent with the logit Jacobian; everything else (sequence
/// log-probabilities, sampling, scores, enumeration) is derived here.
pub trait Policy: Send + Sync {
    fn vocab(&self) -> &Vocab;
    fn max_len(&self) -> usize;
    fn context_dim(&self) -> usize;
    fn num_params(&self) -> usize;

    /// Writes the next-token logits at state `(context, prefix)`.
    fn logits_into(&self, theta: &[f64], context: &[f64], prefix: &[Token], logits: &mut [f64]);

    /// Computes the logits at `(context, prefix)`, asks `cotangent` to turn
    /// them into `∂L/∂logits`, and adds `∂L/∂θ` to `grad`.
    fn accumulate_logit_grad(
        &self,
        theta: &[f64],
        context: &[f64],
        prefix: &[Token],
        grad: &mut [f64],
        cotangent: &mut dyn FnMut(&[f64], &mut [f64]),
    );

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(invalid(format!(
                "theta has dimension {}, policy expects {}",
                theta.len(),
                self.num_params()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("theta[{i}] is not finite")));
        }
        Ok(())
    }

    fn check_prompt(&self, x: &Prompt) -> Result<()> {
        if x.context.len() != self.context_dim() {
            return Err(invalid(format!(
                "context has dimension {}, policy expects {}",
                x.context.len(),
                self.context_dim()
            )));
        }
        Ok(())
    }

    fn check_response(&self, a: &Response) -> Result<()> {
        let vocab = self.vocab();
        if a.len() > self.max_len() {
            return Err(invalid(format!(
                "response length {} exceeds L_max = {}",
                a.len(),
                self.max_len()
            )));
        }
        for (i, &t) in a.iter().enumerate() {
            if t >= vocab.size() {
                return Err(invalid(format!("token {t} out of vocabulary of size {}", vocab.size())));
            }
            if vocab.is_eos(t) && i + 1 != a.len() {
                return Err(invalid("EOS before the end of the response"));
            }
        }
        // Without EOS a response only ends by truncation.
        let terminated = a.last().is_some_and(|&t| vocab.is_eos(t));
        if !terminated && a.len() != self.max_len() {
            return Err(invalid(format!(
                "response of length {} neither ends with EOS nor reaches L_max = {}",
                a.len(),
                self.max_len()
            )));
        }
        Ok(())
    }

    /// `Σ_t log π_θ(a_t | x, a_<t)`.
    fn log_prob(&self, theta: &[f64], x: &Prompt, a: &Response) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_prompt(x)?;
        self.check_response(a)?;
        let mut logits = vec![0.0; self.vocab().size()];
        let mut total = 0.0;
        for t in 0..a.len() {
            self.logits_into(theta, &x.context, &a[..t], &mut logits);
            total += log_softmax_at(&logits, a[t]);
        }
        Ok(total)
    }

    /// Draws a response token by token from `softmax(logits / temperature)`.
    fn sample<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        x: &Prompt,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Response>
    where
        Self: Sized,
    {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        self.check_theta(theta)?;
        self.check_prompt(x)?;
        let vocab = self.vocab();
        let mut logits = vec![0.0; vocab.size()];
        let mut probs = vec![0.0; vocab.size()];
        let mut tokens = Vec::with_capacity(self.max_len());
        while tokens.len() < self.max_len() {
            self.logits_into(theta, &x.context, &tokens, &mut logits);
            logits.iter_mut().for_each(|l| *l /= temperature);
            softmax_into(&logits, &mut probs);
            let t = draw_categorical(&probs, rng.random::<f64>());
            tokens.push(t);
            if vocab.is_eos(t) {
                break;
            }
        }
        Ok(Response(tokens))
    }

    /// Per-step argmax decoding; ties go to the lowest token id.
    fn greedy_decode(&self, theta: &[f64], x: &Prompt) -> Result<Response> {
        self.check_theta(theta)?;
        self.check_prompt(x)?;
        let vocab = self.vocab();
        let mut logits = vec![0.0; vocab.size()];
        let mut tokens = Vec::with_capacity(self.max_len());
        while tokens.len() < self.max_len() {
            self.logits_into(theta, &x.context, &tokens, &mut logits);
            let t = argmax(&logits);
            tokens.push(t);
            if vocab.is_eos(t) {
                break;
            }
        }
        Ok(Response(tokens))
    }

    /// `∇_θ log π_θ(a | x)`.
    fn score(&self, theta: &[f64], x: &Prompt, a: &Response) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(self.num_params());
        self.add_score(theta, x, a, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += weight · ∇_θ log π_θ(a | x)`.
    fn add_score(
        &self,
        theta: &[f64],
        x: &Prompt,
        a: &Response,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_theta(theta)?;
        self.check_prompt(x)?;
        self.check_response(a)?;
        if out.len() != self.num_params() {
            return Err(invalid("score accumulator has the wrong dimension"));
        }
        if weight == 0.0 {
            return Ok(());
        }
        for t in 0..a.len() {
            let token = a[t];
            self.accumulate_logit_grad(theta, &x.context, &a[..t], out, &mut |logits, d| {
                softmax_into(logits, d);
                for v in d.iter_mut() {
                    *v *= -weight;
                }
                d[token] += weight;
            });
        }
        Ok(())
    }

    /// Materializes `π_θ(· | x)` over every response, in enumeration order.
    fn response_distribution(
        &self,
        theta: &[f64],
        x: &Prompt,
        limit: u64,
    ) -> Result<Vec<(Response, f64)>> {
        let mut dist = self.response_log_distribution(theta, x, limit)?;
        dist.iter_mut().for_each(|(_, lp)| *lp = lp.exp());
        Ok(dist)
    }

    /// Like [`Policy::response_distribution`] but with log-probabilities.
    fn response_log_distribution(
        &self,
        theta: &[f64],
        x: &Prompt,
        limit: u64,
    ) -> Result<Vec<(Response, f64)>> {
        self.check_theta(theta)?;
        self.check_prompt(x)?;
        check_enumerable(self.vocab(), self.max_len(), limit)?;
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.max_len());
        let mut logits = vec![0.0; self.vocab().size()];
        distribution_dfs(self, theta, &x.context, &mut prefix, 0.0, &mut logits, &mut out);
        Ok(out)
    }
}

fn distribution_dfs<P: Policy + ?Sized>(
    policy: &P,
    theta: &[f64],
    context: &[f64],
    prefix: &mut Vec<Token>,
    log_p: f64,
    logits: &mut Vec<f64>,
    out: &mut Vec<(Response, f64)>,
) {
    if prefix.len() == policy.max_len() {
        out.push((Response(prefix.clone()), log_p));
        return;
    }
    policy.logits_into(theta, context, prefix, logits);
    let step: Vec<f64> = (0..logits.len()).map(|k| log_softmax_at(logits, k)).collect();
    for (t, lp) in step.into_iter().enumerate() {
        prefix.push(t);
        if policy.vocab().is_eos(t) {
            out.push((Response(prefix.clone()), log_p + lp));
        } else {
            distribution_dfs(policy, theta, context, prefix, log_p + lp, logits, out);
        }
        prefix.pop();
    }
}

/// Concrete policy realizations, serializable into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyModel {
    Tabular(TabularSoftmax),
    Mlp(TinyMlp),
}

impl PolicyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicyModel::Tabular(_) => "tabular",
            PolicyModel::Mlp(_) => "mlp",
        }
    }
}

macro_rules! delegate {
    ($self:ident, $p:ident => $e:expr) => {
        match $self {
            PolicyModel::Tabular($p) => $e,
            PolicyModel::Mlp($p) => $e,
        }
    };
}

impl Policy for PolicyModel {
    fn vocab(&self) -> &Vocab {
        delegate!(self, p => p.vocab())
    }

    fn max_len(&self) -> usize {
        delegate!(self, p => p.max_len())
    }

    fn context_dim(&self) -> usize {
        delegate!(self, p => p.context_dim())
    }

    fn num_params(&self) -> usize {
        delegate!(self, p => p.num_params())
    }

    fn logits_into(&self, theta: &[f64], context: &[f64], prefix: &[Token], logits: &mut [f64]) {
        delegate!(self, p => p.logits_into(theta, context, prefix, logits))
    }

    fn accumulate_logit_grad(
        &self,
        theta: &[f64],
        context: &[f64],
        prefix: &[Token],
        grad: &mut [f64],
        cotangent: &mut dyn FnMut(&[f64], &mut [f64]),
    ) {
        delegate!(self, p => p.accumulate_logit_grad(theta, context, prefix, grad, cotangent))
    }
}

pub fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        cum += p;
        if u < cum {
            return k;
        }
    }
    last_positive
}
