use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use radioscope::exec::ExecMode;
use radioscope::hashing::SecretKey;
use radioscope::models::{generate_corpus, CorpusSpec, MarkovSource, NGramModel, SamplingConfig};
use radioscope::pipelines::{detect_open, DetectOptions, Supervision, Suspect};
use radioscope::schemes::WatermarkConfig;

fn modes() -> Vec<(&'static str, ExecMode)> {
    let mut m = vec![("sequential", ExecMode::Sequential)];
    if ExecMode::available() != ExecMode::Sequential {
        m.push(("parallel", ExecMode::available()));
    }
    m
}

fn setup() -> (NGramModel, WatermarkConfig) {
    let source = MarkovSource::new(256, 1.0, 0).unwrap();
    let text = source.sample_corpus(500, 256, 1);
    let teacher = NGramModel::train(&text, 2, 0.01, 256).unwrap();
    let cfg = WatermarkConfig::kgw(SecretKey::new(7).unwrap(), 2, 256, 0.25, 3.0).unwrap();
    (teacher, cfg)
}

fn bench_generation(c: &mut Criterion) {
    let (teacher, cfg) = setup();
    let spec = CorpusSpec {
        docs: 32,
        doc_len: 256,
        prefix_len: 2,
        seed: 3,
        with_text: false,
    };
    let sampling = SamplingConfig::default();
    let mut g = c.benchmark_group("generate_corpus");
    g.sample_size(10);
    for (name, mode) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| generate_corpus(&teacher, &spec, &sampling, Some(&cfg), mode).unwrap())
        });
    }
    g.finish();
}

fn bench_detect_open(c: &mut Criterion) {
    let (teacher, cfg) = setup();
    let spec = CorpusSpec {
        docs: 400,
        doc_len: 256,
        prefix_len: 2,
        seed: 4,
        with_text: false,
    };
    let sampling = SamplingConfig::default();
    let train = generate_corpus(&teacher, &spec, &sampling, Some(&cfg), ExecMode::available()).unwrap();
    let student = NGramModel::train(&train, 3, 0.01, 256).unwrap();
    let texts: Vec<Vec<u32>> = train[..100].iter().map(|d| d.tokens.clone()).collect();
    let mut g = c.benchmark_group("detect_open");
    g.sample_size(10);
    for (name, mode) in modes() {
        let opts = DetectOptions {
            exec: mode,
            ..DetectOptions::new(Supervision::Unsupervised)
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| detect_open(Suspect::Local(&student), black_box(&texts), &cfg, opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_generation, bench_detect_open);
criterion_main!(benches);
