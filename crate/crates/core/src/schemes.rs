//! Watermark embedding and per-token scoring.
//!
//! Three schemes share the keyed window hash:
//! - greenlist biasing (`Kgw`): a `gamma` fraction of the vocabulary gets `+delta` on its logits;
//! - exponential-minimum sampling (`Aaronson`): the next token is `argmax_v R_v^(1/p_v)`;
//! - multi-bit position/partition biasing (`Mpac`) carrying a 4-ary message.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{
    derive_partition, derive_rvector, greenlist_mask, greenlist_size, rvector_entry,
    window_hash_checked, HashError, MessagePartition, SecretKey, TokenId, WindowRng, WindowSeed,
};

/// Radix of the multi-bit scheme: bits are consumed two at a time.
pub const MPAC_RADIX: usize = 4;

/// Largest `R` value fed to `-ln(1 - R)`.
const R_CAP: f64 = 1.0 - 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("invalid watermark configuration: {0}")]
    InvalidConfig(String),
    #[error("expected a vector of length {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("operation requires the {expected} scheme, configuration uses {actual}")]
    WrongScheme { expected: Scheme, actual: Scheme },
    #[error(transparent)]
    Hash(#[from] HashError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Kgw,
    Aaronson,
    Mpac,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Kgw => "kgw",
            Scheme::Aaronson => "aaronson",
            Scheme::Mpac => "mpac",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kgw" => Ok(Scheme::Kgw),
            "ak" | "aaronson" => Ok(Scheme::Aaronson),
            "mpac" => Ok(Scheme::Mpac),
            other => Err(SchemeError::InvalidConfig(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemeParams {
    Kgw { gamma: f64, delta: f64 },
    /// `temperature` is applied to the logits before the softmax; higher
    /// values hand more of the choice to `R`.
    Aaronson { temperature: f64 },
    Mpac { delta: f64, message: Vec<bool> },
}

/// Everything needed to embed or score a watermark.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkConfig {
    pub key: SecretKey,
    pub k: usize,
    pub vocab_size: usize,
    pub params: SchemeParams,
}

/// One scored `(window, token)` observation with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredToken {
    pub token: TokenId,
    pub window: Vec<TokenId>,
    pub context_id: (u64, u32),
    pub increment: f64,
}

impl WatermarkConfig {
    pub fn new(
        key: SecretKey,
        k: usize,
        vocab_size: usize,
        params: SchemeParams,
    ) -> Result<Self, SchemeError> {
        let cfg = WatermarkConfig {
            key,
            k,
            vocab_size,
            params,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kgw(
        key: SecretKey,
        k: usize,
        vocab_size: usize,
        gamma: f64,
        delta: f64,
    ) -> Result<Self, SchemeError> {
        Self::new(key, k, vocab_size, SchemeParams::Kgw { gamma, delta })
    }

    pub fn aaronson(
        key: SecretKey,
        k: usize,
        vocab_size: usize,
        temperature: f64,
    ) -> Result<Self, SchemeError> {
        Self::new(key, k, vocab_size, SchemeParams::Aaronson { temperature })
    }

    pub fn mpac(
        key: SecretKey,
        k: usize,
        vocab_size: usize,
        delta: f64,
        message: Vec<bool>,
    ) -> Result<Self, SchemeError> {
        Self::new(key, k, vocab_size, SchemeParams::Mpac { delta, message })
    }

    fn validate(&self) -> Result<(), SchemeError> {
        let bad = |m: &str| Err(SchemeError::InvalidConfig(m.to_string()));
        if self.k < 1 {
            return bad("window size k must be at least 1");
        }
        if self.vocab_size < 1 {
            return bad("vocabulary must be non-empty");
        }
        match &self.params {
            SchemeParams::Kgw { gamma, delta } => {
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    return bad("gamma must lie strictly between 0 and 1");
                }
                if !(*delta >= 0.0) {
                    return bad("delta must be non-negative");
                }
                if greenlist_size(*gamma, self.vocab_size) == 0 {
                    return bad("gamma * |V| rounds down to an empty greenlist");
                }
            }
            SchemeParams::Aaronson { temperature } => {
                if !(*temperature > 0.0) {
                    return bad("temperature must be positive");
                }
            }
            SchemeParams::Mpac { delta, message } => {
                if !(*delta >= 0.0) {
                    return bad("delta must be non-negative");
                }
                if message.is_empty() {
                    return bad("multi-bit scheme needs a message");
                }
                if message.len() % 2 != 0 {
                    return bad("message length must be even");
                }
                if self.vocab_size < MPAC_RADIX {
                    return bad("vocabulary smaller than the radix");
                }
            }
        }
        Ok(())
    }

    pub fn scheme(&self) -> Scheme {
        match self.params {
            SchemeParams::Kgw { .. } => Scheme::Kgw,
            SchemeParams::Aaronson { .. } => Scheme::Aaronson,
            SchemeParams::Mpac { .. } => Scheme::Mpac,
        }
    }

    /// Replaces the key, keeping every other parameter.
    pub fn with_key(&self, key: SecretKey) -> Self {
        WatermarkConfig {
            key,
            ..self.clone()
        }
    }

    pub fn seed(&self, window: &[TokenId]) -> Result<WindowSeed, SchemeError> {
        Ok(window_hash_checked(window, self.k, self.key)?)
    }

    /// Bernoulli parameter of a greenlist hit under the null: the exact
    /// greenlist fraction `floor(gamma |V|) / |V|`.
    pub fn null_gamma(&self) -> Option<f64> {
        match self.params {
            SchemeParams::Kgw { gamma, .. } => {
                Some(greenlist_size(gamma, self.vocab_size) as f64 / self.vocab_size as f64)
            }
            _ => None,
        }
    }

    /// Number of message positions `b = n / 2`.
    pub fn positions(&self) -> Option<usize> {
        match &self.params {
            SchemeParams::Mpac { message, .. } => Some(message.len() / 2),
            _ => None,
        }
    }

    fn expect(&self, expected: Scheme) -> Result<(), SchemeError> {
        let actual = self.scheme();
        if actual != expected {
            return Err(SchemeError::WrongScheme { expected, actual });
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<(), SchemeError> {
        if len != self.vocab_size {
            return Err(SchemeError::LengthMismatch {
                expected: self.vocab_size,
                actual: len,
            });
        }
        Ok(())
    }

    /// Adds `delta` to the logits of the window's greenlist.
    pub fn kgw_bias_logits(
        &self,
        logits: &[f64],
        window: &[TokenId],
    ) -> Result<Vec<f64>, SchemeError> {
        let SchemeParams::Kgw { gamma, delta } = self.params else {
            return Err(SchemeError::WrongScheme {
                expected: Scheme::Kgw,
                actual: self.scheme(),
            });
        };
        self.check_len(logits.len())?;
        let mask = greenlist_mask(self.seed(window)?, gamma, self.vocab_size);
        Ok(logits
            .iter()
            .zip(&mask)
            .map(|(&l, &green)| if green { l + delta } else { l })
            .collect())
    }

    /// 1 when `token` is in the greenlist of `window`, else 0.
    pub fn kgw_score(&self, token: TokenId, window: &[TokenId]) -> Result<u8, SchemeError> {
        let SchemeParams::Kgw { gamma, .. } = self.params else {
            return Err(SchemeError::WrongScheme {
                expected: Scheme::Kgw,
                actual: self.scheme(),
            });
        };
        let seed = self.seed(window)?;
        Ok(u8::from(is_green(seed, gamma, self.vocab_size, token)))
    }

    /// `argmax_v R_v^(1/p_v)` over tokens with `p_v > 0`, computed as
    /// `ln(R_v) / p_v`. Ties go to the lowest token id.
    pub fn aaronson_sample(&self, p: &[f64], window: &[TokenId]) -> Result<TokenId, SchemeError> {
        self.expect(Scheme::Aaronson)?;
        self.check_len(p.len())?;
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(SchemeError::InvalidDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if total == 0.0 {
            return Err(SchemeError::InvalidDistribution("all-zero distribution".into()));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(SchemeError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        let r = derive_rvector(self.seed(window)?, self.vocab_size);
        Ok(argmax_exponential(p, &r))
    }

    /// `-ln(1 - R_window[token])`, with `R` capped below one.
    pub fn aaronson_score(&self, token: TokenId, window: &[TokenId]) -> Result<f64, SchemeError> {
        self.expect(Scheme::Aaronson)?;
        let r = rvector_entry(self.seed(window)?, token);
        Ok(aaronson_increment(r))
    }

    /// Multi-bit embedding: the window selects a position `i` and a
    /// vocabulary partition; tokens of block `m_i` get `+delta`.
    pub fn mpac_embed_bias(
        &self,
        logits: &[f64],
        window: &[TokenId],
    ) -> Result<Vec<f64>, SchemeError> {
        let SchemeParams::Mpac { delta, ref message } = self.params else {
            return Err(SchemeError::WrongScheme {
                expected: Scheme::Mpac,
                actual: self.scheme(),
            });
        };
        self.check_len(logits.len())?;
        let part = self.mpac_partition(window)?;
        let digit = message_digits(message)[part.position];
        Ok(logits
            .iter()
            .zip(&part.block_of)
            .map(|(&l, &b)| if b == digit { l + delta } else { l })
            .collect())
    }

    pub fn mpac_partition(&self, window: &[TokenId]) -> Result<MessagePartition, SchemeError> {
        let positions = self.positions().ok_or(SchemeError::WrongScheme {
            expected: Scheme::Mpac,
            actual: self.scheme(),
        })?;
        Ok(derive_partition(
            self.seed(window)?,
            positions,
            MPAC_RADIX,
            self.vocab_size,
        ))
    }

    /// Score increment of one observation for the zero-bit schemes.
    pub fn score(&self, token: TokenId, window: &[TokenId]) -> Result<f64, SchemeError> {
        match self.scheme() {
            Scheme::Kgw => Ok(f64::from(self.kgw_score(token, window)?)),
            Scheme::Aaronson => self.aaronson_score(token, window),
            Scheme::Mpac => Err(SchemeError::InvalidConfig(
                "the multi-bit scheme is decoded with mpac_extract, not scored".into(),
            )),
        }
    }
}

/// Greenlist membership of one token, without building the mask.
pub fn is_green(seed: WindowSeed, gamma: f64, vocab_size: usize, token: TokenId) -> bool {
    let m = greenlist_size(gamma, vocab_size);
    if m == vocab_size {
        return (token as usize) < vocab_size;
    }
    let mut rng = WindowRng::new(seed);
    let mut perm: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    for i in 0..m {
        let j = i + rng.below(vocab_size - i);
        perm.swap(i, j);
        if perm[i] == token {
            return true;
        }
    }
    false
}

pub(crate) fn argmax_exponential(p: &[f64], r: &[f64]) -> TokenId {
    let mut best: Option<(usize, f64)> = None;
    for (v, (&pv, &rv)) in p.iter().zip(r).enumerate() {
        if pv <= 0.0 {
            continue;
        }
        let value = rv.ln() / pv;
        match best {
            Some((_, b)) if value <= b => {}
            _ => best = Some((v, value)),
        }
    }
    best.map(|(v, _)| v as TokenId).unwrap_or(0)
}

pub fn aaronson_increment(r: f64) -> f64 {
    -(1.0 - r.min(R_CAP)).ln()
}

/// Bits taken two at a time: `m_i = 2 b_{2i} + b_{2i+1}`.
pub fn message_digits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(2)
        .map(|c| 2 * u8::from(c[0]) + u8::from(c.get(1).copied().unwrap_or(false)))
        .collect()
}

pub fn digits_to_bits(digits: &[u8]) -> Vec<bool> {
    digits
        .iter()
        .flat_map(|&d| [d & 2 != 0, d & 1 != 0])
        .collect()
}

/// Result of decoding a multi-bit message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageExtraction {
    /// Decoded 4-ary digit per position; `None` when no token voted.
    pub digits: Vec<Option<u8>>,
    /// Vote counts per position and block.
    pub counts: Vec<[u64; MPAC_RADIX]>,
}

impl MessageExtraction {
    /// Per-position majority vote; ties go to the lowest digit.
    pub fn from_counts(counts: Vec<[u64; MPAC_RADIX]>) -> Self {
        let digits = counts
            .iter()
            .map(|c| {
                let max = *c.iter().max().unwrap();
                (max > 0).then(|| c.iter().position(|&x| x == max).unwrap() as u8)
            })
            .collect();
        MessageExtraction { digits, counts }
    }

    pub fn is_decided(&self) -> bool {
        self.digits.iter().all(Option::is_some)
    }

    /// Fraction of reference bits recovered, over decided positions only.
    /// `None` when no position is decided.
    pub fn bit_accuracy(&self, reference: &[bool]) -> Option<f64> {
        let reference = message_digits(reference);
        let mut total = 0usize;
        let mut correct = 0usize;
        for (got, want) in self.digits.iter().zip(&reference) {
            let Some(got) = got else { continue };
            total += 2;
            correct += usize::from((got & 2) == (want & 2)) + usize::from((got & 1) == (want & 1));
        }
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// Decodes the message carried by a stream of `(window, token)` observations.
pub fn mpac_extract<'a, I>(observations: I, cfg: &WatermarkConfig) -> Result<MessageExtraction, SchemeError>
where
    I: IntoIterator<Item = (&'a [TokenId], TokenId)>,
{
    let positions = cfg.positions().ok_or(SchemeError::WrongScheme {
        expected: Scheme::Mpac,
        actual: cfg.scheme(),
    })?;
    let mut counts = vec![[0u64; MPAC_RADIX]; positions];
    for (window, token) in observations {
        let part = cfg.mpac_partition(window)?;
        counts[part.position][part.block(token) as usize] += 1;
    }
    Ok(MessageExtraction::from_counts(counts))
}
