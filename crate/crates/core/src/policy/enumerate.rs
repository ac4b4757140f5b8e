use super::{Response, Token, Vocab};
use crate::error::{Error, Result};

pub const DEFAULT_ENUMERATION_LIMIT: u64 = 65_536;

/// Refuses enumeration when `|V|^L_max` exceeds `limit`; returns the bound otherwise.
pub fn check_enumerable(vocab: &Vocab, max_len: usize, limit: u64) -> Result<u128> {
    let size = (vocab.size() as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if size > limit as u128 {
        return Err(Error::EnumerationRefused { size, limit });
    }
    Ok(size)
}

/// Number of distinct responses: `Σ_{l=0}^{L} |V'|^l` with `V'` the non-EOS
/// tokens, or `|V|^L` when the vocabulary has no EOS.
pub fn count_responses(vocab: &Vocab, max_len: usize) -> u128 {
    match vocab.eos() {
        None => (vocab.size() as u128).pow(max_len as u32),
        Some(_) => {
            let radix = (vocab.size() - 1) as u128;
            (0..=max_len as u32).map(|l| radix.pow(l)).sum()
        }
    }
}

/// Every syntactically valid response exactly once, in depth-first token order.
pub fn enumerate_responses(vocab: &Vocab, max_len: usize, limit: u64) -> Result<Vec<Response>> {
    check_enumerable(vocab, max_len, limit)?;
    let mut out = Vec::with_capacity(count_responses(vocab, max_len) as usize);
    let mut prefix = Vec::with_capacity(max_len);
    dfs(vocab, max_len, &mut prefix, &mut out);
    Ok(out)
}

fn dfs(vocab: &Vocab, max_len: usize, prefix: &mut Vec<Token>, out: &mut Vec<Response>) {
    if prefix.len() == max_len {
        out.push(Response::new(prefix.clone()));
        return;
    }
    for t in 0..vocab.size() {
        prefix.push(t);
        if vocab.is_eos(t) {
            out.push(Response::new(prefix.clone()));
        } else {
            dfs(vocab, max_len, prefix, out);
        }
        prefix.pop();
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    /// Independent count: every raw string in V^L, cut after its first EOS.
    fn brute_force(vocab: &Vocab, max_len: usize) -> BTreeSet<Vec<Token>> {
        let v = vocab.size();
        let total = v.pow(max_len as u32);
        (0..total)
            .map(|mut code| {
                let mut raw = Vec::with_capacity(max_len);
                for _ in 0..max_len {
                    raw.push(code % v);
                    code /= v;
                }
                match raw.iter().position(|&t| vocab.is_eos(t)) {
                    Some(i) => raw[..=i].to_vec(),
                    None => raw,
                }
            })
            .collect()
    }

    #[test]
    fn two_tokens_plus_eos_length_two() {
        let vocab = Vocab::plain(3, Some(2)).unwrap();
        let got = enumerate_responses(&vocab, 2, 1 << 16).unwrap();
        let set: BTreeSet<Vec<Token>> = got.iter().map(|r| r.to_vec()).collect();
        let expect: BTreeSet<Vec<Token>> = [
            vec![2],
            vec![0, 2],
            vec![1, 2],
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1],
        ]
        .into_iter()
        .collect();
        assert_eq!(set, expect);
        assert_eq!(got.len(), 7);
        assert_eq!(count_responses(&vocab, 2), 7);
    }

    #[test]
    fn zero_length_is_singleton() {
        let vocab = Vocab::plain(3, Some(2)).unwrap();
        assert_eq!(enumerate_responses(&vocab, 0, 1).unwrap(), vec![Response::default()]);
    }

    #[test]
    fn four_free_tokens_length_four_matches_brute_force() {
        let vocab = Vocab::plain(5, Some(4)).unwrap();
        let got = enumerate_responses(&vocab, 4, 1 << 16).unwrap();
        let oracle = brute_force(&vocab, 4);
        assert_eq!(got.len(), oracle.len());
        // 340 sequences start with a free token, plus the lone [EOS].
        assert_eq!(oracle.len(), 341);
        assert_eq!(oracle.iter().filter(|s| !vocab.is_eos(s[0])).count(), 340);
        let set: BTreeSet<Vec<Token>> = got.iter().map(|r| r.to_vec()).collect();
        assert_eq!(set, oracle);
    }

    #[test]
    fn closed_form_agrees_with_brute_force() {
        for size in 1..=5 {
            for eos in [None, Some(size - 1)] {
                let vocab = Vocab::plain(size, eos).unwrap();
                for len in 0..=4 {
                    assert_eq!(
                        count_responses(&vocab, len),
                        brute_force(&vocab, len).len() as u128,
                        "size {size} eos {eos:?} len {len}"
                    );
                }
            }
        }
    }

    #[test]
    fn refuses_past_limit() {
        let vocab = Vocab::with_format(6).unwrap();
        let err = enumerate_responses(&vocab, 6, DEFAULT_ENUMERATION_LIMIT).unwrap_err();
        assert!(matches!(err, Error::EnumerationRefused { size: 1_000_000, .. }));
    }
}
