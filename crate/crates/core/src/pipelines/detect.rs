use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dedup::{
    canonical_dedup, open_mode_repeats, prompt_kgrams, AccessMode, Candidate, DedupOptions,
    DedupStats, DedupUnit, FilterSet, FilterStats,
};
use crate::exec::{par_map, par_range, ExecMode};
use crate::hashing::{kgram_fingerprint, TokenId};
use crate::models::remote::{RemoteClient, RemoteError};
use crate::models::{argmax, generate_with_rng, LanguageModel, SamplingConfig};
use crate::schemes::{Scheme, WatermarkConfig};
use crate::stats::TestResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// The detector knows (part of) the watermarked text used in training.
    Supervised,
    Unsupervised,
}

/// The model under suspicion.
#[derive(Clone, Copy)]
pub enum Suspect<'a> {
    Local(&'a dyn LanguageModel),
    Remote(&'a RemoteClient),
}

impl Suspect<'_> {
    fn vocab_size(&self) -> usize {
        match self {
            Suspect::Local(m) => m.vocab_size(),
            Suspect::Remote(c) => c.vocab_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    pub supervision: Supervision,
    /// Disabling de-duplication invalidates the p-value; kept to show why
    /// the rules are needed.
    pub dedup: bool,
    pub unit: DedupUnit,
    /// Cap on scored tuples, applied in canonical order.
    pub budget: Option<u64>,
    /// Documents per entry of `per_chunk`.
    pub chunk_docs: usize,
    pub exec: ExecMode,
    /// Context tokens sent to a remote suspect in reading mode.
    pub remote_span: usize,
}

impl DetectOptions {
    pub fn new(supervision: Supervision) -> Self {
        DetectOptions {
            supervision,
            dedup: true,
            unit: DedupUnit::Tuple,
            budget: None,
            chunk_docs: 100,
            exec: ExecMode::available(),
            remote_span: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scheme: Scheme,
    pub mode: AccessMode,
    pub supervision: Supervision,
    pub key_fingerprint: String,
    pub k: usize,
    /// Null Bernoulli parameter of the greenlist test.
    pub null_gamma: Option<f64>,
    pub n_documents: usize,
    pub n_scored: u64,
    pub score: f64,
    pub p_value: f64,
    pub log10_p: f64,
    /// No tuple was eligible; `p = 1` by convention.
    pub inconclusive: bool,
    pub dedup_enabled: bool,
    pub per_chunk: Vec<TestResult>,
    pub filter_stats: Option<FilterStats>,
    pub dedup_stats: DedupStats,
    /// Eligible tuples dropped by the budget.
    pub budget_dropped: u64,
    pub warnings: Vec<String>,
    /// Fingerprints of the input documents, for overlap checks.
    #[serde(skip)]
    pub doc_fingerprints: Vec<u64>,
}

impl DetectionReport {
    /// Recomputes the test from `(score, n_scored)`.
    pub fn recompute(&self) -> Result<TestResult, PipelineError> {
        Ok(TestResult::for_scheme(
            self.scheme,
            self.score,
            self.n_scored,
            self.null_gamma,
        )?)
    }

    pub fn ln_p(&self) -> f64 {
        self.log10_p * std::f64::consts::LN_10
    }
}

fn check_config(
    cfg: &WatermarkConfig,
    suspect: &Suspect,
    opts: &DetectOptions,
) -> Result<(), PipelineError> {
    if cfg.scheme() == Scheme::Mpac {
        return Err(PipelineError::InvalidInput(
            "multi-bit configurations are decoded with mpac_extract, not tested".into(),
        ));
    }
    if cfg.vocab_size != suspect.vocab_size() {
        return Err(PipelineError::InvalidInput(format!(
            "watermark vocabulary {} differs from the suspect's {}",
            cfg.vocab_size,
            suspect.vocab_size()
        )));
    }
    if opts.budget == Some(0) {
        return Err(PipelineError::InvalidInput("budget must be at least 1".into()));
    }
    if opts.chunk_docs == 0 {
        return Err(PipelineError::InvalidInput("chunk size must be at least 1".into()));
    }
    Ok(())
}

struct Inputs<'a> {
    cfg: &'a WatermarkConfig,
    mode: AccessMode,
    opts: &'a DetectOptions,
    phi: Option<&'a FilterSet>,
    n_documents: usize,
    doc_fingerprints: Vec<u64>,
}

fn finish(inputs: Inputs, candidates: Vec<Candidate>) -> Result<DetectionReport, PipelineError> {
    let Inputs {
        cfg,
        mode,
        opts,
        phi,
        n_documents,
        doc_fingerprints,
    } = inputs;
    let dedup_opts = DedupOptions {
        mode,
        unit: opts.unit,
        enabled: opts.dedup,
    };
    let mut outcome = canonical_dedup(candidates, dedup_opts, phi)?;
    let mut budget_dropped = 0;
    if let Some(b) = opts.budget {
        let b = b as usize;
        if outcome.admitted.len() > b {
            budget_dropped = (outcome.admitted.len() - b) as u64;
            outcome.admitted.truncate(b);
        }
    }
    let increments = par_map(opts.exec, &outcome.admitted, |_, c| cfg.score(c.token, &c.window))
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;

    let gamma = cfg.null_gamma();
    let mut per_chunk = Vec::new();
    let mut i = 0;
    while i < increments.len() {
        let chunk = outcome.admitted[i].doc / opts.chunk_docs as u64;
        let mut j = i;
        while j < increments.len() && outcome.admitted[j].doc / opts.chunk_docs as u64 == chunk {
            j += 1;
        }
        let s: f64 = increments[i..j].iter().sum();
        per_chunk.push(TestResult::for_scheme(cfg.scheme(), s, (j - i) as u64, gamma)?);
        i = j;
    }
    let n = increments.len() as u64;
    let score: f64 = increments.iter().sum();
    let result = TestResult::for_scheme(cfg.scheme(), score, n, gamma)?;

    let mut warnings = Vec::new();
    if !opts.dedup {
        warnings.push(
            "de-duplication disabled: scored tuples are not independent and the p-value is NOT valid"
                .to_string(),
        );
    }
    if n == 0 {
        warnings.push("no eligible tuples; reporting p = 1 (inconclusive)".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut dedup_stats = outcome.stats;
    dedup_stats.admitted = n;
    Ok(DetectionReport {
        scheme: cfg.scheme(),
        mode,
        supervision: opts.supervision,
        key_fingerprint: cfg.key.fingerprint(),
        k: cfg.k,
        null_gamma: gamma,
        n_documents,
        n_scored: n,
        score,
        p_value: result.p_value,
        log10_p: result.log10_p,
        inconclusive: n == 0,
        dedup_enabled: opts.dedup,
        per_chunk,
        filter_stats: outcome.filter,
        dedup_stats,
        budget_dropped,
        warnings,
        doc_fingerprints,
    })
}

/// Why a document could not be processed.
enum Failure {
    /// The suspect stopped answering; earlier documents are still usable.
    Remote(RemoteError),
    Fatal(PipelineError),
}

fn open_candidates<F>(
    doc: &[TokenId],
    idx: usize,
    k: usize,
    repeats: &[bool],
    dedup: bool,
    mut predict: F,
) -> Result<Vec<Candidate>, Failure>
where
    F: FnMut(usize) -> Result<TokenId, Failure>,
{
    let mut out = Vec::with_capacity(doc.len().saturating_sub(k));
    for t in k..doc.len() {
        let in_context = repeats[t - k];
        // excluded anyway, so the suspect is not queried
        let token = if dedup && in_context { 0 } else { predict(t)? };
        out.push(Candidate {
            doc: idx as u64,
            pos: t as u32,
            window: doc[t - k..t].to_vec(),
            token,
            in_context,
        });
    }
    Ok(out)
}

/// Scores the documents processed before the first remote failure; the
/// report is returned inside the error when there was one.
fn finish_remote(
    results: Vec<Result<Vec<Candidate>, Failure>>,
    inputs: Inputs,
) -> Result<DetectionReport, PipelineError> {
    let mut done = Vec::new();
    let mut failure = None;
    for r in results {
        match r {
            Ok(c) if failure.is_none() => done.extend(c),
            Ok(_) => {}
            Err(Failure::Fatal(e)) => return Err(e),
            Err(Failure::Remote(e)) => {
                failure.get_or_insert(e);
            }
        }
    }
    let report = finish(inputs, done)?;
    match failure {
        None => Ok(report),
        Some(error) => Err(PipelineError::Remote {
            error,
            partial: Box::new(report),
        }),
    }
}

/// Reading mode: every full window of the watermarked texts is paired with
/// the suspect's greedy prediction for the next token, and the pairs that
/// pass the open-mode rules are scored.
pub fn detect_open<D: AsRef<[TokenId]> + Sync>(
    suspect: Suspect,
    texts: &[D],
    cfg: &WatermarkConfig,
    opts: &DetectOptions,
) -> Result<DetectionReport, PipelineError> {
    check_config(cfg, &suspect, opts)?;
    let k = cfg.k;
    let inputs = Inputs {
        cfg,
        mode: AccessMode::Open,
        opts,
        phi: None,
        n_documents: texts.len(),
        doc_fingerprints: texts.iter().map(|d| kgram_fingerprint(d.as_ref())).collect(),
    };
    let candidates = match suspect {
        Suspect::Local(model) => {
            let per_doc = par_map(opts.exec, texts, |i, doc| {
                let doc = doc.as_ref();
                let repeats = open_mode_repeats(doc, k, None);
                open_candidates(doc, i, k, &repeats, opts.dedup, |t| Ok(model.predict(&doc[..t])))
            });
            let mut all = Vec::new();
            for c in per_doc {
                match c {
                    Ok(c) => all.extend(c),
                    Err(Failure::Fatal(e)) => return Err(e),
                    Err(Failure::Remote(e)) => unreachable!("local suspect reported {e}"),
                }
            }
            all
        }
        Suspect::Remote(client) => {
            let span = opts.remote_span.max(k + 1);
            let results = client.run_bounded(texts.len(), |i| {
                let doc = texts[i].as_ref();
                let repeats = open_mode_repeats(doc, k, Some(span));
                open_candidates(doc, i, k, &repeats, opts.dedup, |t| {
                    let step = client
                        .next_token(&doc[t.saturating_sub(span)..t])
                        .map_err(Failure::Remote)?;
                    match step.logits {
                        Some(l) => Ok(argmax(&l)),
                        None => Err(Failure::Fatal(PipelineError::Capability(
                            "the suspect does not return logits; use closed-model detection"
                                .into(),
                        ))),
                    }
                })
            });
            return finish_remote(results, inputs);
        }
    };
    finish(inputs, candidates)
}

fn closed_candidates(prompt: &[TokenId], completion: &[TokenId], idx: usize, k: usize) -> Vec<Candidate> {
    let in_prompt = prompt_kgrams(prompt, k);
    let mut transcript = prompt.to_vec();
    transcript.extend_from_slice(completion);
    (prompt.len().max(k)..transcript.len())
        .map(|t| {
            let window = transcript[t - k..t].to_vec();
            Candidate {
                doc: idx as u64,
                pos: t as u32,
                in_context: in_prompt.contains(&kgram_fingerprint(&window)),
                window,
                token: transcript[t],
            }
        })
        .collect()
}

/// Closed-model detection: the suspect completes each prompt and the
/// completions are scored. Windows present in the prompt are excluded;
/// with a filter only windows in `phi` are considered.
pub fn detect_closed(
    suspect: Suspect,
    prompts: &[Vec<TokenId>],
    cfg: &WatermarkConfig,
    phi: Option<&FilterSet>,
    sampling: &SamplingConfig,
    opts: &DetectOptions,
) -> Result<DetectionReport, PipelineError> {
    check_config(cfg, &suspect, opts)?;
    if prompts.is_empty() {
        return Err(PipelineError::InvalidInput("no prompts".into()));
    }
    if let Some(phi) = phi {
        if phi.k() != cfg.k {
            return Err(PipelineError::InvalidInput(format!(
                "filter built with k = {}, watermark uses k = {}",
                phi.k(),
                cfg.k
            )));
        }
    }
    let k = cfg.k;
    let inputs = Inputs {
        cfg,
        mode: AccessMode::Closed,
        opts,
        phi,
        n_documents: prompts.len(),
        doc_fingerprints: prompts.iter().map(|p| kgram_fingerprint(p)).collect(),
    };
    match suspect {
        Suspect::Local(model) => {
            let completions = par_range(opts.exec, prompts.len(), |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
                rng.set_stream(i as u64);
                generate_with_rng(model, &prompts[i], sampling, None, &mut rng)
            });
            let mut candidates = Vec::new();
            for (i, c) in completions.into_iter().enumerate() {
                candidates.extend(closed_candidates(&prompts[i], &c?, i, k));
            }
            finish(inputs, candidates)
        }
        Suspect::Remote(client) => {
            let results = client
                .complete_many(prompts, sampling.max_tokens)
                .into_iter()
                .enumerate()
                .map(|(i, r)| match r {
                    Ok(c) => Ok(closed_candidates(&prompts[i], &c, i, k)),
                    Err(p) => Err(Failure::Remote(p.error)),
                })
                .collect();
            finish_remote(results, inputs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::SecretKey;
    use crate::models::{CopyingModel, MarkovSource, NGramModel, UniformModel};

    fn cfg(seed: u64, v: usize) -> WatermarkConfig {
        WatermarkConfig::kgw(SecretKey::new(seed).unwrap(), 2, v, 0.25, 3.0).unwrap()
    }

    #[test]
    fn self_repeating_text_is_inconclusive() {
        // after the first occurrence every window repeats within the document
        let doc: Vec<TokenId> = [1, 2].repeat(50);
        let r = detect_open(
            Suspect::Local(&UniformModel(8)),
            &[doc],
            &cfg(3, 8),
            &DetectOptions::new(Supervision::Unsupervised),
        )
        .unwrap();
        assert_eq!(r.n_scored, 2);
        let r = detect_open(
            Suspect::Local(&UniformModel(8)),
            &[vec![1u32, 2, 1, 2, 1, 2]],
            &cfg(3, 8),
            &DetectOptions {
                budget: Some(1),
                ..DetectOptions::new(Supervision::Unsupervised)
            },
        )
        .unwrap();
        assert_eq!(r.n_scored, 1);
        assert_eq!(r.budget_dropped, 1);

        let r = detect_open(
            Suspect::Local(&UniformModel(8)),
            &[vec![1u32, 2]],
            &cfg(3, 8),
            &DetectOptions::new(Supervision::Unsupervised),
        )
        .unwrap();
        assert!(r.inconclusive);
        assert_eq!((r.n_scored, r.p_value), (0, 1.0));
    }

    #[test]
    fn report_is_consistent_and_mode_independent() {
        let src = MarkovSource::new(64, 1.0, 1).unwrap();
        let corpus = src.sample_corpus(30, 120, 2);
        let student = NGramModel::train(&corpus, 3, 0.01, 64).unwrap();
        let texts = src.sample_corpus(10, 120, 3);
        let c = cfg(9, 64);
        let mut opts = DetectOptions::new(Supervision::Unsupervised);
        opts.chunk_docs = 3;
        opts.exec = ExecMode::Sequential;
        let a = detect_open(Suspect::Local(&student), &texts, &c, &opts).unwrap();
        opts.exec = ExecMode::available();
        let b = detect_open(Suspect::Local(&student), &texts, &c, &opts).unwrap();
        assert_eq!(a, b);
        let t = a.recompute().unwrap();
        assert_eq!((t.p_value, t.log10_p), (a.p_value, a.log10_p));
        assert_eq!(a.per_chunk.len(), 4);
        assert_eq!(a.per_chunk.iter().map(|c| c.n_scored).sum::<u64>(), a.n_scored);
        assert_eq!(a.dedup_stats.admitted, a.n_scored);
    }

    #[test]
    fn closed_mode_excludes_prompt_windows() {
        // a pure copier repeats the prompt; everything it produces is excluded
        let copier = CopyingModel::new(UniformModel(16), 1.0, 2).unwrap();
        let prompt: Vec<TokenId> = vec![1, 2, 3, 4, 5, 1, 2];
        let sampling = SamplingConfig {
            max_tokens: 20,
            ..Default::default()
        };
        let r = detect_closed(
            Suspect::Local(&copier),
            std::slice::from_ref(&prompt),
            &cfg(4, 16),
            None,
            &sampling,
            &DetectOptions::new(Supervision::Unsupervised),
        )
        .unwrap();
        assert_eq!(r.n_scored, 0);
        assert!(r.inconclusive);
        assert_eq!(r.dedup_stats.candidates, 20);

        let mut opts = DetectOptions::new(Supervision::Unsupervised);
        opts.dedup = false;
        let r = detect_closed(Suspect::Local(&copier), &[prompt], &cfg(4, 16), None, &sampling, &opts)
            .unwrap();
        assert_eq!(r.n_scored, 20);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let opts = DetectOptions::new(Supervision::Unsupervised);
        let m = UniformModel(8);
        assert!(matches!(
            detect_open(Suspect::Local(&m), &[vec![1u32; 5]], &cfg(1, 16), &opts),
            Err(PipelineError::InvalidInput(_))
        ));
        let s = SamplingConfig::default();
        assert!(matches!(
            detect_closed(Suspect::Local(&m), &[], &cfg(1, 8), None, &s, &opts),
            Err(PipelineError::InvalidInput(_))
        ));
        let phi = crate::dedup::build_filter([&[1u32, 2, 3][..]], 3, crate::dedup::FilterSource::Fresh);
        assert!(matches!(
            detect_closed(Suspect::Local(&m), &[vec![1]], &cfg(1, 8), Some(&phi), &s, &opts),
            Err(PipelineError::InvalidInput(_))
        ));
    }
}
