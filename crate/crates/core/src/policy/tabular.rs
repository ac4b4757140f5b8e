use serde::{Deserialize, Serialize};

use super::{Policy, Token, Vocab};
use crate::error::{invalid, Result};

/// Largest parameter table a tabular policy may allocate.
const MAX_PARAMS: usize = 1 << 26;

/// One logit vector per (context bucket, exact prefix). The bucket of a
/// context is the argmax over its first `n_buckets` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularSpec", into = "TabularSpec")]
pub struct TabularSoftmax {
    spec: TabularSpec,
    /// Number of distinct non-EOS tokens; the radix of prefix keys.
    radix: usize,
    /// `offsets[l]` is the index of the first prefix of length `l`.
    offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TabularSpec {
    vocab: Vocab,
    max_len: usize,
    n_buckets: usize,
    context_dim: usize,
}

impl TryFrom<TabularSpec> for TabularSoftmax {
    type Error = crate::Error;

    fn try_from(s: TabularSpec) -> Result<Self> {
        TabularSoftmax::new(s.vocab, s.max_len, s.n_buckets, s.context_dim)
    }
}

impl From<TabularSoftmax> for TabularSpec {
    fn from(t: TabularSoftmax) -> Self {
        t.spec
    }
}

impl TabularSoftmax {
    pub fn new(vocab: Vocab, max_len: usize, n_buckets: usize, context_dim: usize) -> Result<Self> {
        if n_buckets == 0 || n_buckets > context_dim {
            return Err(invalid(format!(
                "tabular policy needs 1 <= n_buckets <= context_dim, got {n_buckets} and {context_dim}"
            )));
        }
        let radix = vocab.size() - usize::from(vocab.eos().is_some());
        let mut offsets = Vec::with_capacity(max_len + 1);
        let mut total: usize = 0;
        let mut width: usize = 1;
        for _ in 0..=max_len {
            offsets.push(total);
            total = total
                .checked_add(width)
                .filter(|&t| t <= MAX_PARAMS)
                .ok_or_else(|| invalid("tabular prefix table too large"))?;
            width = width.saturating_mul(radix);
        }
        let n_params = offsets[max_len]
            .checked_mul(vocab.size() * n_buckets)
            .filter(|&p| p <= MAX_PARAMS)
            .ok_or_else(|| invalid("tabular parameter table too large"))?;
        debug_assert!(n_params <= MAX_PARAMS);
        Ok(Self {
            spec: TabularSpec {
                vocab,
                max_len,
                n_buckets,
                context_dim,
            },
            radix,
            offsets,
        })
    }

    pub fn n_buckets(&self) -> usize {
        self.spec.n_buckets
    }

    /// Number of prefix states per bucket (prefixes of length `< max_len`).
    pub fn n_states(&self) -> usize {
        self.offsets[self.spec.max_len]
    }

    pub fn bucket(&self, context: &[f64]) -> usize {
        super::argmax(&context[..self.spec.n_buckets])
    }

    fn digit(&self, t: Token) -> usize {
        match self.spec.vocab.eos() {
            Some(e) if t > e => t - 1,
            _ => t,
        }
    }

    pub fn state_index(&self, prefix: &[Token]) -> usize {
        let key = prefix
            .iter()
            .fold(0usize, |acc, &t| acc * self.radix + self.digit(t));
        self.offsets[prefix.len()] + key
    }

    /// Index into θ of the logit for `token` after `prefix` in `bucket`.
    pub fn param_index(&self, bucket: usize, prefix: &[Token], token: Token) -> usize {
        self.block_start(bucket, prefix) + token
    }

    fn block_start(&self, bucket: usize, prefix: &[Token]) -> usize {
        (bucket * self.n_states() + self.state_index(prefix)) * self.spec.vocab.size()
    }
}

impl Policy for TabularSoftmax {
    fn vocab(&self) -> &Vocab {
        &self.spec.vocab
    }

    fn max_len(&self) -> usize {
        self.spec.max_len
    }

    fn context_dim(&self) -> usize {
        self.spec.context_dim
    }

    fn num_params(&self) -> usize {
        self.spec.n_buckets * self.n_states() * self.spec.vocab.size()
    }

    fn logits_into(&self, theta: &[f64], context: &[f64], prefix: &[Token], logits: &mut [f64]) {
        let start = self.block_start(self.bucket(context), prefix);
        logits.copy_from_slice(&theta[start..start + logits.len()]);
    }

    fn accumulate_logit_grad(
        &self,
        theta: &[f64],
        context: &[f64],
        prefix: &[Token],
        grad: &mut [f64],
        cotangent: &mut dyn FnMut(&[f64], &mut [f64]),
    ) {
        let v = self.spec.vocab.size();
        let start = self.block_start(self.bucket(context), prefix);
        let mut d = vec![0.0; v];
        cotangent(&theta[start..start + v], &mut d);
        for (g, dk) in grad[start..start + v].iter_mut().zip(&d) {
            *g += dk;
        }
    }
}
