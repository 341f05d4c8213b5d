use super::{LanguageModel, ModelError};
use crate::hashing::TokenId;

/// Adds in-context copying to a base model: when the last `match_len`
/// tokens occurred earlier in the context, probability mass `copy_prob` is
/// moved to the token that followed their most recent occurrence.
///
/// Count models never repeat their prompt on their own; real suspects do,
/// and that is what makes closed-model de-duplication necessary.
#[derive(Debug, Clone)]
pub struct CopyingModel<M> {
    inner: M,
    copy_prob: f64,
    match_len: usize,
}

impl<M: LanguageModel> CopyingModel<M> {
    pub fn new(inner: M, copy_prob: f64, match_len: usize) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&copy_prob) || match_len == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "copy probability must be in [0, 1] and match length >= 1, got {copy_prob}, {match_len}"
            )));
        }
        Ok(CopyingModel {
            inner,
            copy_prob,
            match_len,
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn into_inner(self) -> M {
        self.inner
    }

    /// Token following the latest earlier occurrence of the context suffix.
    pub fn copy_target(&self, context: &[TokenId]) -> Option<TokenId> {
        let m = self.match_len;
        if context.len() <= m {
            return None;
        }
        let suffix = &context[context.len() - m..];
        (0..context.len() - m)
            .rev()
            .find(|&i| &context[i..i + m] == suffix)
            .map(|i| context[i + m])
    }
}

impl<M: LanguageModel> LanguageModel for CopyingModel<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let mut p = self.inner.next_distribution(context);
        if let Some(t) = self.copy_target(context) {
            for x in p.iter_mut() {
                *x *= 1.0 - self.copy_prob;
            }
            p[t as usize] += self.copy_prob;
        }
        p
    }

    fn token_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let base = self.inner.token_prob(context, token);
        match self.copy_target(context) {
            Some(t) => (1.0 - self.copy_prob) * base + if t == token { self.copy_prob } else { 0.0 },
            None => base,
        }
    }
}
