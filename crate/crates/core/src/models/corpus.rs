use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::hashing::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Provenance tag: generated under a watermark or not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wm: Option<bool>,
}

impl Document {
    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        Document {
            tokens,
            text: None,
            wm: None,
        }
    }
}

impl AsRef<[TokenId]> for Document {
    fn as_ref(&self) -> &[TokenId] {
        &self.tokens
    }
}

pub fn write_jsonl<W: Write>(mut w: W, docs: &[Document]) -> std::io::Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, docs: &[Document]) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, docs)?;
    w.flush()?;
    Ok(())
}

/// Reads one document per non-blank line; errors carry the line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>, ModelError> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line).map_err(|e| ModelError::Corpus {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Watermarked share `rho` of the training corpus and degree of supervision
/// `d` of the detector's known corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub rho: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedDataset {
    /// Watermarked documents first, then clean ones.
    pub training: Vec<Document>,
    /// What the detector knows: watermarked training documents plus fresh
    /// watermarked decoys.
    pub supervised: Vec<Document>,
    pub n_watermarked: usize,
    pub n_decoys: usize,
}

impl MixedDataset {
    pub fn watermarked_training(&self) -> &[Document] {
        &self.training[..self.n_watermarked]
    }
}

/// Builds a training corpus of `total` documents, `round(rho * total)` of
/// them watermarked, and a known set in which those documents make up a
/// fraction `d`. The rest of the known set is taken from `wm` documents not
/// used in training. With `d = 0` the known set holds as many documents as
/// were watermarked in training, none of them from training.
pub fn mix_dataset(
    wm: &[Document],
    clean: &[Document],
    spec: MixSpec,
    total: usize,
) -> Result<MixedDataset, ModelError> {
    for (name, v) in [("rho", spec.rho), ("d", spec.d)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(ModelError::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let n_wm = (spec.rho * total as f64).round() as usize;
    let n_clean = total - n_wm;
    let known = if spec.d == 0.0 {
        n_wm
    } else {
        (n_wm as f64 / spec.d).round() as usize
    };
    let n_members = if spec.d == 0.0 { 0 } else { n_wm };
    let n_decoys = known - n_members;
    if n_wm + n_decoys > wm.len() {
        return Err(ModelError::InsufficientCorpus(format!(
            "need {} watermarked documents ({n_wm} for training, {n_decoys} decoys), have {}",
            n_wm + n_decoys,
            wm.len()
        )));
    }
    if n_clean > clean.len() {
        return Err(ModelError::InsufficientCorpus(format!(
            "need {n_clean} clean documents, have {}",
            clean.len()
        )));
    }
    let mut training = wm[..n_wm].to_vec();
    training.extend_from_slice(&clean[..n_clean]);
    let mut supervised = wm[..n_members].to_vec();
    supervised.extend_from_slice(&wm[n_wm..n_wm + n_decoys]);
    Ok(MixedDataset {
        training,
        supervised,
        n_watermarked: n_wm,
        n_decoys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(n: usize, tag: bool) -> Vec<Document> {
        (0..n)
            .map(|i| Document {
                tokens: vec![i as TokenId, u32::from(tag)],
                text: None,
                wm: Some(tag),
            })
            .collect()
    }

    #[test]
    fn rounding_and_counts() {
        let (wm, clean) = (docs(200, true), docs(1000, false));
        let mix = mix_dataset(&wm, &clean, MixSpec { rho: 0.05, d: 1.0 }, 1000).unwrap();
        assert_eq!(mix.n_watermarked, 50);
        assert_eq!(mix.training.len(), 1000);
        assert_eq!(mix.training.iter().filter(|d| d.wm == Some(true)).count(), 50);
        assert_eq!(mix.supervised, mix.watermarked_training());
    }

    #[test]
    fn extremes() {
        let (wm, clean) = (docs(100, true), docs(100, false));
        let none = mix_dataset(&wm, &clean, MixSpec { rho: 0.0, d: 1.0 }, 100).unwrap();
        assert!(none.training.iter().all(|d| d.wm == Some(false)));
        assert!(none.supervised.is_empty());
        let all = mix_dataset(&wm, &clean, MixSpec { rho: 1.0, d: 1.0 }, 100).unwrap();
        assert_eq!(all.supervised, all.training);
    }

    #[test]
    fn dilution_adds_fresh_decoys() {
        let (wm, clean) = (docs(1000, true), docs(100, false));
        let mix = mix_dataset(&wm, &clean, MixSpec { rho: 0.1, d: 0.1 }, 100).unwrap();
        assert_eq!(mix.n_watermarked, 10);
        assert_eq!(mix.supervised.len(), 100);
        assert_eq!(mix.n_decoys, 90);
        // decoys are disjoint from training
        for d in &mix.supervised[10..] {
            assert!(!mix.training.contains(d));
        }
        let unsup = mix_dataset(&wm, &clean, MixSpec { rho: 0.1, d: 0.0 }, 100).unwrap();
        assert_eq!(unsup.supervised.len(), 10);
        assert!(unsup.supervised.iter().all(|d| !unsup.training.contains(d)));
    }

    #[test]
    fn insufficient_corpus() {
        let (wm, clean) = (docs(10, true), docs(10, false));
        assert!(matches!(
            mix_dataset(&wm, &clean, MixSpec { rho: 0.5, d: 0.1 }, 20),
            Err(ModelError::InsufficientCorpus(_))
        ));
        assert!(matches!(
            mix_dataset(&wm, &clean, MixSpec { rho: 0.0, d: 1.0 }, 20),
            Err(ModelError::InsufficientCorpus(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut d = docs(3, true);
        d[1].text = Some("ka to".into());
        d[2].wm = None;
        save_jsonl(&path, &d).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), d);
        std::fs::write(&path, "{\"tokens\":[1]}\nnot json\n").unwrap();
        match read_jsonl(&path) {
            Err(ModelError::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
