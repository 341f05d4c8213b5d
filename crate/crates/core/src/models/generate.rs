use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_text, Document, LanguageModel, ModelError};
use crate::exec::{par_range, ExecMode};
use crate::hashing::TokenId;
use crate::schemes::{SchemeParams, WatermarkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// `0` selects greedy decoding.
    pub temperature: f64,
    pub nucleus_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.8,
            nucleus_p: 0.95,
            max_tokens: 256,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "nucleus_p must lie in (0, 1], got {}",
                self.nucleus_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(ModelError::InvalidConfig("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = q.iter().sum();
    for x in q.iter_mut() {
        *x /= z;
    }
    q
}

fn greedy(logits: &[f64]) -> TokenId {
    super::argmax(logits)
}

/// Masks everything outside the smallest top set whose mass reaches `p`.
fn nucleus_mask(logits: &mut [f64], p: f64) {
    if p >= 1.0 {
        return;
    }
    let q = softmax(logits);
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, &t) in order.iter().enumerate() {
        mass += q[t];
        if mass >= p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    for &t in &order[keep..] {
        logits[t] = f64::NEG_INFINITY;
    }
}

/// One decoding step: temperature, nucleus truncation, then the watermark
/// (logit bias, or the keyed argmax for the exponential scheme). Positions
/// whose context is shorter than the window are not watermarked.
pub fn sample_next<R: Rng + ?Sized>(
    p: &[f64],
    context: &[TokenId],
    sampling: &SamplingConfig,
    wm: Option<&WatermarkConfig>,
    rng: &mut R,
) -> Result<TokenId, ModelError> {
    let window = wm.and_then(|cfg| {
        (context.len() >= cfg.k).then(|| (cfg, &context[context.len() - cfg.k..]))
    });
    let mut logits: Vec<f64> = p.iter().map(|&x| x.ln()).collect();
    if sampling.temperature > 0.0 {
        for l in logits.iter_mut() {
            *l /= sampling.temperature;
        }
        nucleus_mask(&mut logits, sampling.nucleus_p);
    }
    if let Some((cfg, window)) = window {
        logits = match &cfg.params {
            SchemeParams::Kgw { .. } => cfg.kgw_bias_logits(&logits, window)?,
            SchemeParams::Mpac { .. } => cfg.mpac_embed_bias(&logits, window)?,
            SchemeParams::Aaronson { temperature } => {
                if sampling.temperature == 0.0 {
                    return Ok(greedy(&logits));
                }
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                return Ok(cfg.aaronson_sample(&softmax(&scaled), window)?);
            }
        };
    }
    if sampling.temperature == 0.0 {
        return Ok(greedy(&logits));
    }
    let q = softmax(&logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (t, &x) in q.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = t;
            if u < acc {
                return Ok(t as TokenId);
            }
        }
    }
    Ok(last as TokenId)
}

/// Samples `sampling.max_tokens` tokens after `prompt` and returns them.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    sampling: &SamplingConfig,
    wm: Option<&WatermarkConfig>,
) -> Result<Vec<TokenId>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    generate_with_rng(model, prompt, sampling, wm, &mut rng)
}

pub fn generate_with_rng<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    sampling: &SamplingConfig,
    wm: Option<&WatermarkConfig>,
    rng: &mut R,
) -> Result<Vec<TokenId>, ModelError> {
    sampling.validate()?;
    if let Some(cfg) = wm {
        if cfg.vocab_size != model.vocab_size() {
            return Err(ModelError::InvalidConfig(format!(
                "watermark vocabulary {} differs from the model's {}",
                cfg.vocab_size,
                model.vocab_size()
            )));
        }
    }
    let mut ctx = Vec::with_capacity(prompt.len() + sampling.max_tokens);
    ctx.extend_from_slice(prompt);
    for _ in 0..sampling.max_tokens {
        let p = model.next_distribution(&ctx);
        let t = sample_next(&p, &ctx, sampling, wm, rng)?;
        ctx.push(t);
    }
    Ok(ctx.split_off(prompt.len()))
}

/// Shape of a synthetic corpus. Each document starts with `prefix_len`
/// unwatermarked tokens; the rest is generated under the watermark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub docs: usize,
    pub doc_len: usize,
    pub prefix_len: usize,
    pub seed: u64,
    pub with_text: bool,
}

/// Document `i` depends only on `(spec.seed, i)`, so the corpus is the same
/// whatever the thread count.
pub fn generate_corpus<M: LanguageModel + ?Sized>(
    model: &M,
    spec: &CorpusSpec,
    sampling: &SamplingConfig,
    wm: Option<&WatermarkConfig>,
    mode: ExecMode,
) -> Result<Vec<Document>, ModelError> {
    if spec.prefix_len > spec.doc_len {
        return Err(ModelError::InvalidConfig(
            "prefix longer than the document".into(),
        ));
    }
    let docs = par_range(mode, spec.docs, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let mut tokens = Vec::with_capacity(spec.doc_len);
        for (len, cfg) in [(spec.prefix_len, None), (spec.doc_len - spec.prefix_len, wm)] {
            if len == 0 {
                continue;
            }
            let step = SamplingConfig {
                max_tokens: len,
                ..*sampling
            };
            let out = generate_with_rng(model, &tokens, &step, cfg, &mut rng)?;
            tokens.extend(out);
        }
        Ok(Document {
            text: spec.with_text.then(|| render_text(&tokens)),
            wm: Some(wm.is_some()),
            tokens,
        })
    });
    docs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::SecretKey;
    use crate::models::{MarkovSource, NGramModel};

    fn key(s: u64) -> SecretKey {
        SecretKey::new(s).unwrap()
    }

    #[test]
    fn greedy_is_deterministic() {
        let src = MarkovSource::new(32, 1.0, 1).unwrap();
        let s = SamplingConfig {
            temperature: 0.0,
            max_tokens: 40,
            ..Default::default()
        };
        let a = generate(&src, &[3], &s, None).unwrap();
        let b = generate(&src, &[3], &SamplingConfig { seed: 99, ..s }, None).unwrap();
        assert_eq!(a, b);
        for (i, &t) in a.iter().enumerate() {
            let prev = if i == 0 { 3 } else { a[i - 1] };
            assert_eq!(t, src.predict(&[prev]));
        }
    }

    #[test]
    fn nucleus_keeps_the_smallest_top_set() {
        let mut l: Vec<f64> = [0.5, 0.3, 0.15, 0.05].iter().map(|x: &f64| x.ln()).collect();
        nucleus_mask(&mut l, 0.8);
        assert!(l[0].is_finite() && l[1].is_finite());
        assert!(l[2] == f64::NEG_INFINITY && l[3] == f64::NEG_INFINITY);
    }

    #[test]
    fn seeded_sampling_reproduces() {
        let src = MarkovSource::new(64, 1.0, 2).unwrap();
        let s = SamplingConfig {
            max_tokens: 100,
            seed: 5,
            ..Default::default()
        };
        let wm = WatermarkConfig::kgw(key(7), 2, 64, 0.25, 3.0).unwrap();
        let a = generate(&src, &[1, 2], &s, Some(&wm)).unwrap();
        assert_eq!(a, generate(&src, &[1, 2], &s, Some(&wm)).unwrap());
        assert_ne!(a, generate(&src, &[1, 2], &SamplingConfig { seed: 6, ..s }, Some(&wm)).unwrap());
    }

    #[test]
    fn kgw_text_is_green_biased() {
        let src = MarkovSource::new(256, 1.0, 3).unwrap();
        let wm = WatermarkConfig::kgw(key(11), 2, 256, 0.25, 3.0).unwrap();
        let s = SamplingConfig {
            max_tokens: 500,
            seed: 1,
            ..Default::default()
        };
        let out = generate(&src, &[0, 1], &s, Some(&wm)).unwrap();
        let mut ctx = vec![0, 1];
        ctx.extend(&out);
        let greens: u32 = (2..ctx.len())
            .map(|t| u32::from(wm.kgw_score(ctx[t], &ctx[t - 2..t]).unwrap()))
            .sum();
        assert!(greens as f64 / 500.0 > 0.5, "{greens}");
    }

    #[test]
    fn aaronson_text_scores_above_null_mean() {
        let src = MarkovSource::new(256, 1.0, 4).unwrap();
        let wm = WatermarkConfig::aaronson(key(12), 2, 256, 1.0).unwrap();
        let s = SamplingConfig {
            max_tokens: 500,
            seed: 2,
            ..Default::default()
        };
        let out = generate(&src, &[5, 6], &s, Some(&wm)).unwrap();
        let mut ctx = vec![5, 6];
        ctx.extend(&out);
        let mean: f64 = (2..ctx.len())
            .map(|t| wm.aaronson_score(ctx[t], &ctx[t - 2..t]).unwrap())
            .sum::<f64>()
            / 500.0;
        assert!(mean > 1.0, "{mean}");
    }

    #[test]
    fn corpus_independent_of_exec_mode() {
        let corpus = MarkovSource::new(32, 1.0, 5).unwrap().sample_corpus(20, 100, 1);
        let teacher = NGramModel::train(&corpus, 2, 0.01, 32).unwrap();
        let wm = WatermarkConfig::kgw(key(3), 2, 32, 0.25, 3.0).unwrap();
        let spec = CorpusSpec {
            docs: 6,
            doc_len: 30,
            prefix_len: 2,
            seed: 8,
            with_text: true,
        };
        let s = SamplingConfig::default();
        let a = generate_corpus(&teacher, &spec, &s, Some(&wm), ExecMode::Sequential).unwrap();
        let b = generate_corpus(&teacher, &spec, &s, Some(&wm), ExecMode::available()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|d| d.tokens.len() == 30 && d.wm == Some(true)));
        assert!(a[0].text.is_some());
    }
}
