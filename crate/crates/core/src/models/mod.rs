//! Toy language models used as teacher and student, plus a client for
//! suspect models served over HTTP.

mod copying;
mod corpus;
mod generate;
mod ngram;
pub mod remote;
mod source;

use thiserror::Error;

use crate::hashing::TokenId;
use crate::schemes::SchemeError;

pub use copying::CopyingModel;
pub use corpus::{
    mix_dataset, read_jsonl, save_jsonl, write_jsonl, Document, MixSpec, MixedDataset,
};
pub use generate::{
    generate, generate_corpus, generate_with_rng, sample_next, CorpusSpec, SamplingConfig,
};
pub use ngram::NGramModel;
pub use source::{render_text, MarkovSource};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}:{line}: {message}")]
    Corpus {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A next-token predictor with full distribution access.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Probability vector over the vocabulary given the tokens so far.
    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64>;

    fn token_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.next_distribution(context)[token as usize]
    }

    /// Greedy readout; ties go to the lowest token id.
    fn predict(&self, context: &[TokenId]) -> TokenId {
        argmax(&self.next_distribution(context))
    }

    /// Negative log-likelihood of `tokens` in nats, position by position.
    fn log_loss(&self, tokens: &[TokenId]) -> f64 {
        (0..tokens.len())
            .map(|t| -self.token_prob(&tokens[..t], tokens[t]).ln())
            .sum()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        (**self).next_distribution(context)
    }
    fn token_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        (**self).token_prob(context, token)
    }
    fn predict(&self, context: &[TokenId]) -> TokenId {
        (**self).predict(context)
    }
    fn log_loss(&self, tokens: &[TokenId]) -> f64 {
        (**self).log_loss(tokens)
    }
}

pub(crate) fn argmax(p: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Uniform model: every token equally likely.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel(pub usize);

impl LanguageModel for UniformModel {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn next_distribution(&self, _context: &[TokenId]) -> Vec<f64> {
        vec![1.0 / self.0 as f64; self.0]
    }
    fn token_prob(&self, _context: &[TokenId], _token: TokenId) -> f64 {
        1.0 / self.0 as f64
    }
    fn predict(&self, _context: &[TokenId]) -> TokenId {
        0
    }
}
