//! Radioactivity spread over several disjoint "dialects", each living in its
//! own slice of the vocabulary, combined into one test.

use radioscope::exec::ExecMode;
use radioscope::hashing::{SecretKey, TokenId};
use radioscope::models::{generate_corpus, CorpusSpec, Document, MarkovSource, NGramModel, SamplingConfig};
use radioscope::pipelines::{combine_distributions, detect_open, DetectOptions, Supervision, Suspect};
use radioscope::schemes::WatermarkConfig;

const V: usize = 256;
const DIALECTS: usize = 5;
const BLOCK: usize = V / DIALECTS;
const LEN: usize = 128;

fn teacher(j: usize) -> NGramModel {
    let src = MarkovSource::new(BLOCK, 1.0, 100 + j as u64).unwrap();
    let docs: Vec<Vec<TokenId>> = src
        .sample_corpus(400, LEN, j as u64)
        .into_iter()
        .map(|d| d.into_iter().map(|t| t + (j * BLOCK) as TokenId).collect())
        .collect();
    NGramModel::train(&docs, 2, 1e-4, V).unwrap()
}

fn corpus(m: &NGramModel, docs: usize, seed: u64, wm: Option<&WatermarkConfig>) -> Vec<Document> {
    let spec = CorpusSpec {
        docs,
        doc_len: LEN,
        prefix_len: 0,
        seed,
        with_text: false,
    };
    let sampling = SamplingConfig {
        temperature: 0.8,
        nucleus_p: 0.95,
        max_tokens: LEN,
        seed,
    };
    generate_corpus(m, &spec, &sampling, wm, ExecMode::available()).unwrap()
}

#[test]
fn fisher_combination_beats_every_dialect() {
    let cfg = WatermarkConfig::kgw(SecretKey::new(0x5eed_d1a1).unwrap(), 2, V, 0.25, 3.0).unwrap();
    let mut reports = Vec::new();
    for j in 0..DIALECTS {
        let t = teacher(j);
        let mut train = corpus(&t, 40, 10 + j as u64, Some(&cfg));
        train.extend(corpus(&t, 400, 20 + j as u64, None));
        let in_block = train
            .iter()
            .flat_map(|d| &d.tokens)
            .filter(|&&x| (x as usize) / BLOCK == j)
            .count() as f64
            / (train.len() * LEN) as f64;
        assert!(in_block > 0.95, "dialect {j} leaks: {in_block}");
        let student = NGramModel::train(&train, 3, 0.01, V).unwrap();
        let texts = corpus(&t, 40, 30 + j as u64, Some(&cfg));
        let r = detect_open(Suspect::Local(&student), &texts, &cfg, &DetectOptions::new(Supervision::Unsupervised))
            .unwrap();
        reports.push(r);
    }
    let ps: Vec<f64> = reports.iter().map(|r| r.p_value).collect();
    assert!(ps.iter().all(|&p| p < 0.37), "{ps:?}");
    let c = combine_distributions(&reports).unwrap();
    let min = ps.iter().copied().fold(1.0, f64::min);
    assert!(c.p_value < min, "combined {} vs min {min}", c.p_value);
    assert!(c.warnings.is_empty(), "{:?}", c.warnings);
    assert_eq!(c.sources.len(), DIALECTS);
}
