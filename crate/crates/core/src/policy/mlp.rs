use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Policy, Token, Vocab};
use crate::error::{invalid, Result};
use crate::param::ParamVector;
use crate::seed;

/// One tanh hidden layer over `context ⊕ prefix`, where the prefix is encoded
/// as one one-hot block per position.
///
/// θ layout: `W1` stored input-major (`input_dim × hidden`), then `b1`,
/// then `W2` (`vocab × hidden`), then `b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpSpec", into = "MlpSpec")]
pub struct TinyMlp {
    spec: MlpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MlpSpec {
    vocab: Vocab,
    max_len: usize,
    context_dim: usize,
    hidden: usize,
}

impl TryFrom<MlpSpec> for TinyMlp {
    type Error = crate::Error;

    fn try_from(s: MlpSpec) -> Result<Self> {
        TinyMlp::new(s.vocab, s.max_len, s.context_dim, s.hidden)
    }
}

impl From<TinyMlp> for MlpSpec {
    fn from(m: TinyMlp) -> Self {
        m.spec
    }
}

impl TinyMlp {
    pub fn new(vocab: Vocab, max_len: usize, context_dim: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(invalid("hidden width must be positive"));
        }
        Ok(Self {
            spec: MlpSpec {
                vocab,
                max_len,
                context_dim,
                hidden,
            },
        })
    }

    pub fn hidden(&self) -> usize {
        self.spec.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.spec.context_dim + self.spec.max_len.saturating_sub(1) * self.spec.vocab.size()
    }

    /// Seeded Gaussian weights, zero biases. `scale` multiplies the
    /// fan-in-normalized standard deviation of both weight matrices.
    pub fn init_theta(&self, seed: u64, scale: f64) -> ParamVector {
        let h = self.spec.hidden;
        let v = self.spec.vocab.size();
        let mut rng = seed::rng(seed);
        let mut theta = ParamVector::zeros(self.num_params());
        let (w1_sd, w2_sd) = (scale, scale / (h as f64).sqrt());
        for w in &mut theta[self.w1()..self.w1() + self.input_dim() * h] {
            *w = w1_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        for w in &mut theta[self.w2()..self.w2() + v * h] {
            *w = w2_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        theta
    }

    fn w1(&self) -> usize {
        0
    }

    fn b1(&self) -> usize {
        self.input_dim() * self.spec.hidden
    }

    fn w2(&self) -> usize {
        self.b1() + self.spec.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.spec.vocab.size() * self.spec.hidden
    }

    /// Non-zero inputs as (index, value); the encoding is sparse.
    fn active_inputs(&self, context: &[f64], prefix: &[Token]) -> Vec<(usize, f64)> {
        let v = self.spec.vocab.size();
        let cd = self.spec.context_dim;
        let mut active: Vec<(usize, f64)> = context
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, x))
            .collect();
        active.extend(prefix.iter().enumerate().map(|(pos, &t)| (cd + pos * v + t, 1.0)));
        active
    }

    fn forward(&self, theta: &[f64], active: &[(usize, f64)], hidden: &mut [f64], logits: &mut [f64]) {
        let h = self.spec.hidden;
        hidden.copy_from_slice(&theta[self.b1()..self.b1() + h]);
        for &(i, x) in active {
            let col = &theta[self.w1() + i * h..self.w1() + (i + 1) * h];
            for (acc, w) in hidden.iter_mut().zip(col) {
                *acc += w * x;
            }
        }
        hidden.iter_mut().for_each(|z| *z = z.tanh());
        let w2 = &theta[self.w2()..self.b2()];
        let b2 = &theta[self.b2()..];
        for (k, out) in logits.iter_mut().enumerate() {
            let row = &w2[k * h..(k + 1) * h];
            *out = b2[k] + row.iter().zip(hidden.iter()).map(|(w, z)| w * z).sum::<f64>();
        }
    }
}

impl Policy for TinyMlp {
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
        let h = self.spec.hidden;
        let v = self.spec.vocab.size();
        self.input_dim() * h + h + v * h + v
    }

    fn logits_into(&self, theta: &[f64], context: &[f64], prefix: &[Token], logits: &mut [f64]) {
        let active = self.active_inputs(context, prefix);
        let mut hidden = vec![0.0; self.spec.hidden];
        self.forward(theta, &active, &mut hidden, logits);
    }

    fn accumulate_logit_grad(
        &self,
        theta: &[f64],
        context: &[f64],
        prefix: &[Token],
        grad: &mut [f64],
        cotangent: &mut dyn FnMut(&[f64], &mut [f64]),
    ) {
        let h = self.spec.hidden;
        let v = self.spec.vocab.size();
        let active = self.active_inputs(context, prefix);
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; v];
        self.forward(theta, &active, &mut hidden, &mut logits);
        let mut dl = vec![0.0; v];
        cotangent(&logits, &mut dl);

        let (w2, b2) = (self.w2(), self.b2());
        let mut dpre = vec![0.0; h];
        for k in 0..v {
            if dl[k] == 0.0 {
                continue;
            }
            grad[b2 + k] += dl[k];
            let row = w2 + k * h;
            for j in 0..h {
                grad[row + j] += dl[k] * hidden[j];
                dpre[j] += dl[k] * theta[row + j];
            }
        }
        for (d, z) in dpre.iter_mut().zip(&hidden) {
            *d *= 1.0 - z * z;
        }
        let b1 = self.b1();
        for (g, d) in grad[b1..b1 + h].iter_mut().zip(&dpre) {
            *g += d;
        }
        for &(i, x) in &active {
            let col = self.w1() + i * h;
            for (g, d) in grad[col..col + h].iter_mut().zip(&dpre) {
                *g += x * d;
            }
        }
    }
}
