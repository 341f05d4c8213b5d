use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::exec::{par_map, ExecMode};
use crate::models::{Document, LanguageModel};
use crate::stats::{ks_two_sample, KsResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub ks: KsResult,
    pub n_candidates: usize,
    pub n_fresh: usize,
    /// Documents skipped because they carry no text.
    pub excluded_candidates: usize,
    pub excluded_fresh: usize,
    pub mean_candidate_loss: f64,
    pub mean_fresh_loss: f64,
}

/// Length of the zlib stream of `text` at the default level.
pub fn zlib_len(text: &str) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// Log-loss in nats divided by the compressed size of the text.
pub fn calibrated_loss<M: LanguageModel + ?Sized>(model: &M, doc: &Document) -> Option<f64> {
    let text = doc.text.as_deref()?;
    Some(model.log_loss(&doc.tokens) / zlib_len(text).max(1) as f64)
}

fn losses<M: LanguageModel + ?Sized>(model: &M, docs: &[Document], exec: ExecMode) -> Vec<f64> {
    par_map(exec, docs, |_, d| calibrated_loss(model, d))
        .into_iter()
        .flatten()
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Membership inference without a watermark: compares the calibrated loss
/// of candidate documents with fresh ones by a two-sample K-S test.
pub fn mia_detect<M: LanguageModel + ?Sized>(
    model: &M,
    candidates: &[Document],
    fresh: &[Document],
    exec: ExecMode,
) -> Result<MiaReport, PipelineError> {
    let a = losses(model, candidates, exec);
    let b = losses(model, fresh, exec);
    let (ex_a, ex_b) = (candidates.len() - a.len(), fresh.len() - b.len());
    if ex_a + ex_b > 0 {
        log::warn!("{} documents without text excluded from the membership test", ex_a + ex_b);
    }
    if a.is_empty() || b.is_empty() {
        return Err(PipelineError::InvalidInput(
            "both document sets need at least one document with text".into(),
        ));
    }
    Ok(MiaReport {
        ks: ks_two_sample(&a, &b)?,
        n_candidates: a.len(),
        n_fresh: b.len(),
        excluded_candidates: ex_a,
        excluded_fresh: ex_b,
        mean_candidate_loss: mean(&a),
        mean_fresh_loss: mean(&b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{render_text, MarkovSource, NGramModel};

    fn with_text(tokens: Vec<u32>) -> Document {
        Document {
            text: Some(render_text(&tokens)),
            tokens,
            wm: None,
        }
    }

    #[test]
    fn compression_shrinks_repetitive_text() {
        let rep = "ka ".repeat(500);
        assert!(zlib_len(&rep) < 50);
        assert!(zlib_len("") > 0);
    }

    #[test]
    fn identical_sets_do_not_differ() {
        let src = MarkovSource::new(32, 1.0, 1).unwrap();
        let docs: Vec<Document> = src.sample_corpus(40, 60, 2).into_iter().map(with_text).collect();
        let m = NGramModel::train(&docs, 2, 0.1, 32).unwrap();
        let r = mia_detect(&m, &docs, &docs, ExecMode::available()).unwrap();
        assert_eq!(r.ks.d, 0.0);
        assert_eq!(r.ks.p, 1.0);
    }

    #[test]
    fn textless_documents_are_excluded() {
        let src = MarkovSource::new(32, 1.0, 1).unwrap();
        let mut docs: Vec<Document> = src.sample_corpus(10, 60, 2).into_iter().map(with_text).collect();
        docs[3].text = None;
        let m = NGramModel::train(&docs, 2, 0.1, 32).unwrap();
        let r = mia_detect(&m, &docs, &docs[5..], ExecMode::Sequential).unwrap();
        assert_eq!((r.n_candidates, r.excluded_candidates), (9, 1));
        let bare = vec![Document::from_tokens(vec![1, 2])];
        assert!(mia_detect(&m, &bare, &docs, ExecMode::Sequential).is_err());
    }
}
