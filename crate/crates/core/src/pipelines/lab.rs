//! Desk-scale experiment setup: a Zipf Markov source, a teacher fitted to
//! it, and helpers to generate corpora and train students.

use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::exec::ExecMode;
use crate::hashing::{SecretKey, TokenId};
use crate::models::{
    generate_corpus, CopyingModel, CorpusSpec, Document, MarkovSource, NGramModel, SamplingConfig,
};
use crate::schemes::WatermarkConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub vocab_size: usize,
    pub source_exponent: f64,
    pub source_seed: u64,
    pub teacher_order: usize,
    pub teacher_lambda: f64,
    /// Source documents of 256 tokens the teacher is fitted on.
    pub teacher_docs: usize,
    /// Length of generated documents.
    pub doc_len: usize,
    pub sampling: SamplingConfig,
    pub student_lambda: f64,
    /// In-context copying of the suspect.
    pub copy_prob: f64,
    pub copy_len: usize,
    pub exec: ExecMode,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            vocab_size: 256,
            source_exponent: 1.0,
            source_seed: 0,
            teacher_order: 2,
            teacher_lambda: 0.01,
            teacher_docs: 2000,
            doc_len: 256,
            sampling: SamplingConfig::default(),
            student_lambda: 0.01,
            copy_prob: 0.6,
            copy_len: 2,
            exec: ExecMode::available(),
        }
    }
}

const TEACHER_DOC_LEN: usize = 256;

pub struct Lab {
    cfg: LabConfig,
    source: MarkovSource,
    teacher: NGramModel,
}

/// Deterministic 64-bit seed for a named stream of a run.
pub fn stream_seed(seed: u64, rep: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(rep.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Secret key of repetition `rep` under `seed`.
pub fn run_key(seed: u64, rep: u64) -> SecretKey {
    let mut i = 0u64;
    loop {
        let s = stream_seed(seed, rep, &format!("key{i}"));
        if let Ok(k) = SecretKey::new(s) {
            return k;
        }
        i += 1;
    }
}

/// First `len` tokens of each document.
pub fn prompts(docs: &[Document], len: usize) -> Vec<Vec<TokenId>> {
    docs.iter()
        .map(|d| d.tokens[..len.min(d.tokens.len())].to_vec())
        .collect()
}

impl Lab {
    pub fn new(cfg: LabConfig) -> Result<Self, PipelineError> {
        CopyingModel::new(crate::models::UniformModel(1), cfg.copy_prob, cfg.copy_len)?;
        cfg.sampling.validate()?;
        let source = MarkovSource::new(cfg.vocab_size, cfg.source_exponent, cfg.source_seed)?;
        let text = source.sample_corpus(cfg.teacher_docs, TEACHER_DOC_LEN, cfg.source_seed ^ 0x5EED);
        let teacher = NGramModel::train(&text, cfg.teacher_order, cfg.teacher_lambda, cfg.vocab_size)?;
        Ok(Lab {
            cfg,
            source,
            teacher,
        })
    }

    pub fn config(&self) -> &LabConfig {
        &self.cfg
    }

    pub fn source(&self) -> &MarkovSource {
        &self.source
    }

    pub fn teacher(&self) -> &NGramModel {
        &self.teacher
    }

    /// Teacher documents; the first `k` tokens of each are unwatermarked.
    pub fn corpus(
        &self,
        docs: usize,
        seed: u64,
        wm: Option<&WatermarkConfig>,
    ) -> Result<Vec<Document>, PipelineError> {
        let spec = CorpusSpec {
            docs,
            doc_len: self.cfg.doc_len,
            prefix_len: wm.map_or(0, |c| c.k).min(self.cfg.doc_len),
            seed,
            with_text: true,
        };
        Ok(generate_corpus(
            &self.teacher,
            &spec,
            &self.cfg.sampling,
            wm,
            self.cfg.exec,
        )?)
    }

    pub fn train_student(&self, docs: &[Document], order: usize) -> Result<NGramModel, PipelineError> {
        Ok(NGramModel::train(
            docs,
            order,
            self.cfg.student_lambda,
            self.cfg.vocab_size,
        )?)
    }

    /// Wraps a student with the lab's in-context copying behaviour.
    pub fn suspect(&self, student: NGramModel) -> CopyingModel<NGramModel> {
        CopyingModel::new(student, self.cfg.copy_prob, self.cfg.copy_len)
            .expect("copy parameters are validated in Lab::new")
    }
}
