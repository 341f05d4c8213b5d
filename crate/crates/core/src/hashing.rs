//! Keyed hashing of watermark windows and every pseudo-random object derived
//! from a window seed: greenlists, key vectors and multi-bit partitions.
//!
//! The seed of a window `(x_{-k}, .., x_{-1})` under key `s` is the linear
//! recurrence `h_{n+1} = (h_n * s + x_n) mod (2^64 - 1)` started at zero.
//! The seed initialises a splitmix64-expanded xoshiro256** generator, and all
//! derived objects consume that generator in a pinned order so that the same
//! `(seed, parameters)` produce the same output on every platform.

use std::fmt;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Token identifier. Token ids are the interface; there is no tokenizer.
pub type TokenId = u32;

const MODULUS: u128 = (1u128 << 64) - 1;

/// Public multiplier used for de-duplication fingerprints. It is independent
/// of the secret key so that filter files can be reused across keys.
pub const FINGERPRINT_KEY: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HashError {
    #[error("secret key must be non-zero modulo 2^64 - 1 (got {0:#x})")]
    DegenerateKey(u64),
    #[error("window has {actual} tokens, configuration expects k = {expected}")]
    WindowLength { expected: usize, actual: usize },
}

/// Secret key of the watermark hash.
///
/// Keys congruent to zero modulo `2^64 - 1` (that is `0` and `u64::MAX`)
/// collapse the recurrence to the last token alone and are rejected.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SecretKey(u64);

impl SecretKey {
    pub fn new(s: u64) -> Result<Self, HashError> {
        if s == 0 || s == u64::MAX {
            return Err(HashError::DegenerateKey(s));
        }
        Ok(SecretKey(s))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Truncated SHA-256 of the key, safe to put in logs and manifests.
    pub fn fingerprint(self) -> String {
        let digest = Sha256::digest(self.0.to_le_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(fp:{})", self.fingerprint())
    }
}

/// Final value `h_0` of the window recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowSeed(pub u64);

#[inline]
fn hash_step(h: u64, multiplier: u64, token: TokenId) -> u64 {
    ((h as u128 * multiplier as u128 + token as u128) % MODULUS) as u64
}

/// Seed of a watermark window under `key`.
pub fn window_hash(window: &[TokenId], key: SecretKey) -> WindowSeed {
    WindowSeed(fold_hash(window, key.0))
}

/// Like [`window_hash`] but rejects windows whose length differs from `k`.
pub fn window_hash_checked(
    window: &[TokenId],
    k: usize,
    key: SecretKey,
) -> Result<WindowSeed, HashError> {
    if window.len() != k {
        return Err(HashError::WindowLength {
            expected: k,
            actual: window.len(),
        });
    }
    Ok(window_hash(window, key))
}

fn fold_hash(tokens: &[TokenId], multiplier: u64) -> u64 {
    tokens.iter().fold(0u64, |h, &x| hash_step(h, multiplier, x))
}

/// Key-independent 64-bit fingerprint of a k-gram.
pub fn kgram_fingerprint(tokens: &[TokenId]) -> u64 {
    fold_hash(tokens, FINGERPRINT_KEY)
}

/// Fingerprint of the `(k+1)`-tuple `window ++ [token]`: the window
/// fingerprint extended by one more step of the recurrence.
pub fn tuple_fingerprint(window: &[TokenId], token: TokenId) -> u64 {
    hash_step(kgram_fingerprint(window), FINGERPRINT_KEY, token)
}

/// Generator seeded from a window seed: splitmix64 expands `h_0` into the
/// xoshiro256** state.
pub struct WindowRng(Xoshiro256StarStar);

impl WindowRng {
    pub fn new(seed: WindowSeed) -> Self {
        WindowRng(Xoshiro256StarStar::seed_from_u64(seed.0))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Integer in `0..n` by multiply-high of one 64-bit draw.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in `[0, 1)`: the top 53 bits of one 64-bit draw.
    #[inline]
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Number of greenlist tokens: `floor(gamma * |V|)`.
pub fn greenlist_size(gamma: f64, vocab_size: usize) -> usize {
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999..
    (((gamma * vocab_size as f64) + 1e-9).floor() as usize).min(vocab_size)
}

/// Forward Fisher-Yates: fills `perm` with the first `m` entries of a
/// seed-determined permutation of `0..vocab_size`.
fn partial_shuffle(rng: &mut WindowRng, vocab_size: usize, m: usize, perm: &mut Vec<TokenId>) {
    perm.clear();
    perm.extend(0..vocab_size as TokenId);
    for i in 0..m.min(vocab_size.saturating_sub(1)) {
        let j = i + rng.below(vocab_size - i);
        perm.swap(i, j);
    }
    perm.truncate(m);
}

/// Greenlist of a window seed, in permutation order.
pub fn derive_greenlist(seed: WindowSeed, gamma: f64, vocab_size: usize) -> Vec<TokenId> {
    let m = greenlist_size(gamma, vocab_size);
    let mut perm = Vec::with_capacity(vocab_size);
    partial_shuffle(&mut WindowRng::new(seed), vocab_size, m, &mut perm);
    perm
}

/// Greenlist as a membership mask over the vocabulary.
pub fn greenlist_mask(seed: WindowSeed, gamma: f64, vocab_size: usize) -> Vec<bool> {
    let mut mask = vec![false; vocab_size];
    for t in derive_greenlist(seed, gamma, vocab_size) {
        mask[t as usize] = true;
    }
    mask
}

/// Key vector `R` in `[0,1)^|V|`, one 64-bit draw per coordinate.
pub fn derive_rvector(seed: WindowSeed, vocab_size: usize) -> Vec<f64> {
    let mut rng = WindowRng::new(seed);
    (0..vocab_size).map(|_| rng.unit()).collect()
}

/// Single coordinate `R[token]` without materialising the tail of the vector.
pub fn rvector_entry(seed: WindowSeed, token: TokenId) -> f64 {
    let mut rng = WindowRng::new(seed);
    for _ in 0..token {
        rng.next_u64();
    }
    rng.unit()
}

/// Multi-bit assignment of a window: which message position it carries and
/// the partition of the vocabulary into `radix` blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessagePartition {
    pub position: usize,
    /// `block_of[token]` is the block index of `token`.
    pub block_of: Vec<u8>,
}

impl MessagePartition {
    pub fn block(&self, token: TokenId) -> u8 {
        self.block_of[token as usize]
    }

    pub fn members(&self, block: u8) -> Vec<TokenId> {
        self.block_of
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == block)
            .map(|(t, _)| t as TokenId)
            .collect()
    }
}

/// Selects the message position with 32-bit rejection sampling, then
/// shuffles the vocabulary and slices it into `radix` contiguous blocks whose
/// sizes differ by at most one (earlier blocks take the remainder).
pub fn derive_partition(
    seed: WindowSeed,
    positions: usize,
    radix: usize,
    vocab_size: usize,
) -> MessagePartition {
    assert!(positions >= 1 && radix >= 1 && radix <= u8::MAX as usize + 1);
    let mut rng = WindowRng::new(seed);
    let zone = ((1u64 << 32) / positions as u64) * positions as u64;
    let position = loop {
        let u = rng.next_u64() >> 32;
        if u < zone {
            break (u % positions as u64) as usize;
        }
    };
    let mut perm = Vec::with_capacity(vocab_size);
    partial_shuffle(&mut rng, vocab_size, vocab_size, &mut perm);
    let (base, extra) = (vocab_size / radix, vocab_size % radix);
    let mut block_of = vec![0u8; vocab_size];
    let mut start = 0;
    for block in 0..radix {
        let size = base + usize::from(block < extra);
        for &t in &perm[start..start + size] {
            block_of[t as usize] = block as u8;
        }
        start += size;
    }
    MessagePartition { position, block_of }
}
