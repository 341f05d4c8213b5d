use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LanguageModel, ModelError};
use crate::hashing::TokenId;

/// First-order Markov source: from every state the next token follows a Zipf
/// law over a state-specific random ranking of the vocabulary. The exponent
/// sets the entropy.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    vocab_size: usize,
    exponent: f64,
    rankings: Vec<Vec<TokenId>>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl MarkovSource {
    pub fn new(vocab_size: usize, exponent: f64, seed: u64) -> Result<Self, ModelError> {
        if vocab_size == 0 || !(exponent >= 0.0 && exponent.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "source needs vocab_size >= 1 and a finite exponent >= 0, got {vocab_size}, {exponent}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rankings = (0..vocab_size)
            .map(|_| {
                let mut r: Vec<TokenId> = (0..vocab_size as TokenId).collect();
                r.shuffle(&mut rng);
                r
            })
            .collect();
        let raw: Vec<f64> = (1..=vocab_size)
            .map(|r| (r as f64).powf(-exponent))
            .collect();
        let z: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(MarkovSource {
            vocab_size,
            exponent,
            rankings,
            weights,
            cumulative,
        })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Entropy of the next-token law in nats (identical for every state).
    pub fn entropy(&self) -> f64 {
        self.weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|w| -w * w.ln())
            .sum()
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, state: TokenId, rng: &mut R) -> TokenId {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.vocab_size - 1];
        let rank = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.vocab_size - 1);
        self.rankings[state as usize][rank]
    }

    pub fn sample_document<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        let mut doc = Vec::with_capacity(len);
        if len == 0 {
            return doc;
        }
        doc.push(rng.random_range(0..self.vocab_size as TokenId));
        while doc.len() < len {
            let next = self.sample_next(doc[doc.len() - 1], rng);
            doc.push(next);
        }
        doc
    }

    /// `docs` documents of `len` tokens; document `i` depends only on
    /// `(seed, i)`.
    pub fn sample_corpus(&self, docs: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
        (0..docs)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample_document(len, &mut rng)
            })
            .collect()
    }
}

impl LanguageModel for MarkovSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        match context.last() {
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
            Some(&s) => {
                let mut p = vec![0.0; self.vocab_size];
                for (rank, &t) in self.rankings[s as usize].iter().enumerate() {
                    p[t as usize] = self.weights[rank];
                }
                p
            }
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "to", "ri", "ne", "su", "mi", "lo", "pa", "de", "fu", "ga", "hi", "jo", "ve", "zu", "bo",
];

/// Renders token ids as pseudo-words (one syllable per hex digit), giving
/// documents a text payload for compression-based calibration.
pub fn render_text(tokens: &[TokenId]) -> String {
    let mut out = String::with_capacity(tokens.len() * 6);
    for (i, &t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let digits = format!("{t:x}");
        for d in digits.bytes() {
            let v = (d as char).to_digit(16).unwrap() as usize;
            out.push_str(SYLLABLES[v]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_is_normalized_zipf() {
        let s = MarkovSource::new(64, 1.0, 3).unwrap();
        let p = s.next_distribution(&[5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!((sorted[0] / sorted[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let s = MarkovSource::new(16, 0.0, 1).unwrap();
        assert!((s.entropy() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn corpus_is_reproducible() {
        let s = MarkovSource::new(32, 1.1, 9).unwrap();
        let a = s.sample_corpus(4, 50, 77);
        assert_eq!(a, s.sample_corpus(4, 50, 77));
        assert_ne!(a, s.sample_corpus(4, 50, 78));
        assert!(a.iter().flatten().all(|&t| t < 32));
    }

    #[test]
    fn empirical_frequencies_follow_the_law() {
        let s = MarkovSource::new(8, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = s.next_distribution(&[3]);
        let mut counts = [0usize; 8];
        let n = 200_000;
        for _ in 0..n {
            counts[s.sample_next(3, &mut rng) as usize] += 1;
        }
        for (c, q) in counts.iter().zip(p) {
            assert!((*c as f64 / n as f64 - q).abs() < 0.005);
        }
    }

    #[test]
    fn text_rendering() {
        assert_eq!(render_text(&[0, 17, 255]), "ka toto bobo");
        assert_eq!(render_text(&[]), "");
    }
}
