use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LanguageModel, ModelError};
use crate::hashing::TokenId;

const MAGIC: &[u8; 4] = b"RSM1";
const MAX_VOCAB: usize = 1 << 16;
const MAX_ORDER: usize = 9;

#[derive(Debug, Clone, Default, PartialEq)]
struct Followers {
    total: u64,
    counts: Vec<(TokenId, u64)>,
}

impl Followers {
    fn add(&mut self, token: TokenId, n: u64) {
        self.total += n;
        match self.counts.iter_mut().find(|(t, _)| *t == token) {
            Some((_, c)) => *c += n,
            None => self.counts.push((token, n)),
        }
    }
}

/// Count-based model with add-lambda smoothing on the longest context seen
/// in training. Contexts shorter than `order - 1` are tried in turn; when no
/// suffix was ever seen the prediction is uniform.
///
/// Contexts are packed 16 bits per token, so `vocab_size <= 65536` and
/// `order <= 9`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    lambda: f64,
    vocab_size: usize,
    // tables[len] maps a packed context of `len` tokens to its followers
    tables: Vec<HashMap<u128, Followers>>,
}

fn pack(ctx: &[TokenId]) -> u128 {
    ctx.iter().fold(0u128, |acc, &t| (acc << 16) | t as u128)
}

fn unpack(mut key: u128, len: usize) -> Vec<TokenId> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (key & 0xFFFF) as TokenId;
        key >>= 16;
    }
    out
}

impl NGramModel {
    /// An untrained model: uniform everywhere until counts are added.
    pub fn empty(order: usize, lambda: f64, vocab_size: usize) -> Result<Self, ModelError> {
        if order == 0 || order > MAX_ORDER {
            return Err(ModelError::InvalidConfig(format!(
                "order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        if vocab_size == 0 || vocab_size > MAX_VOCAB {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary size must be in 1..={MAX_VOCAB}, got {vocab_size}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "smoothing constant must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(NGramModel {
            order,
            lambda,
            vocab_size,
            tables: vec![HashMap::new(); order],
        })
    }

    pub fn train<D: AsRef<[TokenId]>>(
        corpus: &[D],
        order: usize,
        lambda: f64,
        vocab_size: usize,
    ) -> Result<Self, ModelError> {
        let mut model = Self::empty(order, lambda, vocab_size)?;
        model.train_more(corpus)?;
        Ok(model)
    }

    /// Adds the counts of another corpus to this model.
    pub fn train_more<D: AsRef<[TokenId]>>(&mut self, corpus: &[D]) -> Result<(), ModelError> {
        if corpus.iter().all(|d| d.as_ref().is_empty()) {
            return Err(ModelError::EmptyCorpus);
        }
        for doc in corpus {
            let doc = doc.as_ref();
            if let Some(&token) = doc.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    token,
                    vocab_size: self.vocab_size,
                });
            }
        }
        let max_ctx = self.order - 1;
        for doc in corpus {
            let doc = doc.as_ref();
            for t in 0..doc.len() {
                if max_ctx == 0 {
                    self.tables[0].entry(0).or_default().add(doc[t], 1);
                    continue;
                }
                for len in 1..=max_ctx.min(t) {
                    let key = pack(&doc[t - len..t]);
                    self.tables[len].entry(key).or_default().add(doc[t], 1);
                }
            }
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of distinct (context, token) records.
    pub fn num_records(&self) -> usize {
        self.tables
            .iter()
            .flat_map(|t| t.values())
            .map(|f| f.counts.len())
            .sum()
    }

    fn lookup(&self, context: &[TokenId]) -> Option<&Followers> {
        if self.order == 1 {
            return self.tables[0].get(&0);
        }
        let longest = (self.order - 1).min(context.len());
        (1..=longest).rev().find_map(|len| {
            self.tables[len]
                .get(&pack(&context[context.len() - len..]))
                .filter(|f| f.total > 0)
        })
    }

    fn denominator(&self, f: &Followers) -> f64 {
        f.total as f64 + self.lambda * self.vocab_size as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Binary layout: `RSM1`, order (u32), lambda (f64), vocab size (u32),
    /// record count (u64), then records sorted by context length, context
    /// and token: length (u8), context tokens (u32 each), token (u32),
    /// count (u64). All integers little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut records: Vec<(u8, Vec<TokenId>, TokenId, u64)> = Vec::new();
        for (len, table) in self.tables.iter().enumerate() {
            for (&key, f) in table {
                let ctx = unpack(key, len);
                for &(t, c) in &f.counts {
                    records.push((len as u8, ctx.clone(), t, c));
                }
            }
        }
        records.sort_unstable();
        w.write_all(MAGIC)?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&self.lambda.to_le_bytes())?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&(records.len() as u64).to_le_bytes())?;
        for (len, ctx, t, c) in records {
            w.write_all(&[len])?;
            for x in ctx {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&t.to_le_bytes())?;
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("missing RSM1 header"));
        }
        let order = read_u32(&mut r)? as usize;
        let lambda = f64::from_le_bytes(read_array(&mut r)?);
        let vocab_size = read_u32(&mut r)? as usize;
        let n = u64::from_le_bytes(read_array(&mut r)?);
        let mut model = Self::empty(order, lambda, vocab_size)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut prev: Option<(u8, Vec<TokenId>, TokenId)> = None;
        for _ in 0..n {
            let [len] = read_array::<1, _>(&mut r)?;
            if len as usize >= order.max(1) || (order > 1 && len == 0) {
                return Err(bad("context length does not match the order"));
            }
            let ctx = (0..len)
                .map(|_| read_u32(&mut r))
                .collect::<Result<Vec<_>, _>>()?;
            let token = read_u32(&mut r)?;
            let count = u64::from_le_bytes(read_array(&mut r)?);
            if ctx.iter().chain([&token]).any(|&t| t as usize >= vocab_size) {
                return Err(bad("token outside the vocabulary"));
            }
            if count == 0 {
                return Err(bad("zero count record"));
            }
            let rec = (len, ctx, token);
            if prev.as_ref().is_some_and(|p| *p >= rec) {
                return Err(bad("records are not strictly sorted"));
            }
            model.tables[len as usize]
                .entry(pack(&rec.1))
                .or_default()
                .add(token, count);
            prev = Some(rec);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| ModelError::Checkpoint("truncated record".into()))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size;
        match self.lookup(context) {
            None => vec![1.0 / v as f64; v],
            Some(f) => {
                let denom = self.denominator(f);
                let mut p = vec![self.lambda / denom; v];
                for &(t, c) in &f.counts {
                    p[t as usize] = (c as f64 + self.lambda) / denom;
                }
                p
            }
        }
    }

    fn token_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        match self.lookup(context) {
            None => 1.0 / self.vocab_size as f64,
            Some(f) => {
                let c = f
                    .counts
                    .iter()
                    .find(|(t, _)| *t == token)
                    .map_or(0, |&(_, c)| c);
                (c as f64 + self.lambda) / self.denominator(f)
            }
        }
    }

    fn predict(&self, context: &[TokenId]) -> TokenId {
        match self.lookup(context) {
            None => 0,
            Some(f) => {
                let &(mut best, mut best_c) = &f.counts[0];
                for &(t, c) in &f.counts[1..] {
                    if c > best_c || (c == best_c && t < best) {
                        best = t;
                        best_c = c;
                    }
                }
                best
            }
        }
    }
}
